"""Command-line entry point: ``cvad synth|train|score|eval|recon``.

Exit codes: 0 success, 2 config error, 3 I/O or dataset error, 4 training
divergence, 5 checkpoint/config mismatch or missing calibration, 6 an OOD
role that cannot be evaluated (single class).
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import data, metrics, models, scoring, training
from .config import load_run_config
from .errors import (CheckpointError, ConfigError, DatasetError, DimensionError, DivergenceError,
                     MetricError, StateError)

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_METRIC = 2, 3, 4, 5, 6
SEPARATOR = 2

log = logging.getLogger("cvad")


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_meta(path, cfg, **extra):
    meta = {"config_hash": cfg.digest(), "seed": cfg.train.seed, **extra}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_ckpt(path, cfg=None, explicit_config=False):
    try:
        ckpt = training.load_checkpoint(path)
    except FileNotFoundError:
        raise CommandError(EXIT_IO, f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CommandError(EXIT_MISMATCH, str(exc)) from None
    if explicit_config and cfg is not None and cfg.arch != ckpt.arch:
        raise CommandError(EXIT_MISMATCH, f"{path}: checkpoint arch {ckpt.arch} does not match config {cfg.arch}")
    return ckpt


def _image_paths(target):
    target = Path(target)
    if target.is_dir():
        return data.list_images(target)
    if target.is_file():
        return [target]
    raise DatasetError(f"{target} is neither an image nor a directory")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    manifest = data.synth_generate(cfg.data, args.out_dir)
    _write_meta(Path(args.out_dir) / "run.meta.json", cfg, spec_hash=manifest.spec_hash)
    counts = {}
    for e in manifest.entries:
        counts[(e.role, e.split)] = counts.get((e.role, e.split), 0) + 1
    print(f"wrote {len(manifest.entries)} images to {args.out_dir}")
    for (role, split), n in sorted(counts.items()):
        print(f"  {role:12s} {split:5s} {n}")


def cmd_train(args, cfg):
    manifest = data.read_manifest(args.data_dir)
    arch = cfg.arch
    # only ID rows of the train/val splits are ever read
    _, train_x = data.load_split(manifest, "train", arch.image_size, arch.in_channels, role="id")
    _, val_x = data.load_split(manifest, "val", arch.image_size, arch.in_channels, role="id")
    history = []
    out = Path(args.out_ckpt)
    log_path = out.with_name(out.name + ".log.csv")
    try:
        ckpt = training.train_generator(train_x, val_x, arch, cfg.train, args.deterministic, history,
                                        config_hash=cfg.digest())
        if args.stage == "full":
            ckpt = training.train_discriminator(ckpt, train_x, val_x, cfg.train, args.deterministic, history)
            ckpt = training.calibrate(ckpt, val_x)
    finally:
        if history:
            training.write_log(history, log_path)
    digest = training.save_checkpoint(ckpt, out)
    val = [r for r in history if r["split"] == "val"]
    print(f"stage {ckpt.stage} checkpoint written to {out} (sha256 {digest[:16]})")
    print(f"  val L_G epoch 1: {val[0]['loss_total']:.2f}  epoch {len(val)}: {val[-1]['loss_total']:.2f}")
    if ckpt.stage == "full":
        acc = [r for r in history if r["split"] == "disc_val"][-1]["disc_acc"]
        print(f"  discriminator held-out accuracy: {acc:.4f}")
        print(f"  calibration L_G range: [{ckpt.calibration[0]:.2f}, {ckpt.calibration[1]:.2f}]")


def cmd_score(args, cfg):
    ckpt = _load_ckpt(args.ckpt, cfg, args.config is not None)
    if ckpt.stage != "full":
        raise CommandError(EXIT_MISMATCH, f"{args.ckpt}: scoring needs a full checkpoint, got stage {ckpt.stage}")
    mode = args.mode or cfg.eval.score_mode
    if mode == "calibrated" and ckpt.calibration is None:
        raise CommandError(EXIT_MISMATCH, f"{args.ckpt}: checkpoint carries no calibration")
    arch = ckpt.arch
    target = Path(args.data)
    if (target / "manifest.csv").is_file():
        manifest = data.read_manifest(target)
        entries, x = data.load_split(manifest, "test", arch.image_size, arch.in_channels)
        ids = [e.path for e in entries]
        labels = [e.label for e in entries]
        roles = [e.role for e in entries]
    else:
        paths = _image_paths(target)
        x = data.load_images(paths, arch.image_size, arch.in_channels)
        ids = [p.name for p in paths]
        labels = [-1] * len(ids)
        roles = ["unlabeled"] * len(ids)
    if len(x) == 0:
        raise DatasetError(f"nothing to score in {target}")
    with _threads(args):
        s_g, s_d, s, l_g = scoring.ablation_scores(ckpt, x, mode)
    out = Path(args.out)
    scoring.write_scores(out, ids, labels, roles, l_g, s_g, s_d, s)
    _write_meta(out.with_name(out.name + ".meta.json"), cfg, mode=mode, checkpoint_sha256=_sha256(args.ckpt))
    print(f"scored {len(ids)} samples ({mode} mode) -> {out}")


def cmd_eval(args, cfg):
    try:
        cols = scoring.read_scores(args.scores)
    except FileNotFoundError:
        raise CommandError(EXIT_IO, f"score file not found: {args.scores}") from None
    rounds = args.rounds or cfg.eval.bootstrap_rounds
    try:
        rows = metrics.evaluate_roles(cols, rounds, cfg.eval.seed)
    except MetricError as exc:
        raise CommandError(EXIT_METRIC, str(exc)) from None
    out = Path(args.out)
    metrics.write_report(rows, out)
    _write_meta(out.with_name(out.name + ".meta.json"), cfg, rounds=rounds, scores_sha256=_sha256(args.scores))
    print(f"{'score':4s} {'ood_role':12s} {'AUC':>14s} {'TPR':>14s} {'FPR':>14s}")
    for r in rows:
        print(f"{r['score']:4s} {r['ood_role']:12s} {r['auc_mean']:.3f}+-{r['auc_std']:.3f}   "
              f"{r['tpr']:.3f}+-{r['tpr_std']:.3f}   {r['fpr']:.3f}+-{r['fpr_std']:.3f}")
    if args.plot:
        labels, roles = cols["label"], np.asarray(cols["role"])
        curves = {}
        for role in sorted({r["ood_role"] for r in rows}):
            mask = (labels == 0) | (roles == role)
            curves[role] = metrics.roc_curve(cols["S"][mask], labels[mask])
        png = out.with_suffix(".png")
        metrics.plot_roc(curves, png, title="ROC of the combined anomaly score")
        print(f"ROC plot -> {png}")
    print(f"report -> {out}")


def _to_u8(panel):
    return np.round(np.clip(panel, 0.0, 1.0) * 255.0).astype(np.uint8)


def recon_grid(x1_logits, x2_logits, x_recon, x):
    """One sample's 4-panel grid: branch, primary, combined, input.

    All arguments are C x H x W; returns an H x (4W + 6) [x C] uint8 image
    with white 2-px separators.
    """
    panels = [models.nn.sigmoid(x2_logits), models.nn.sigmoid(x1_logits), x_recon, x]
    c, h, w = x.shape
    sep = np.full((c, h, SEPARATOR), 255, np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(_to_u8(p))
    grid = np.concatenate(parts, axis=2).transpose(1, 2, 0)
    return grid[:, :, 0] if c == 1 else grid


def cmd_recon(args, cfg):
    ckpt = _load_ckpt(args.ckpt, cfg, args.config is not None)
    arch = ckpt.arch
    paths = _image_paths(args.images)
    x = data.load_images(paths, arch.image_size, arch.in_channels)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(exist_ok=True)
    with _threads(args):
        out = models.generator_forward(x, ckpt.generator)
    for i, p in enumerate(paths):
        grid = recon_grid(out.x1_logits[i], out.x2_logits[i], out.x_recon[i], x[i])
        Image.fromarray(grid).save(out_dir / f"{p.stem}_recon.png")
    _write_meta(out_dir / "recon.meta.json", cfg, checkpoint_sha256=_sha256(args.ckpt))
    print(f"wrote {len(paths)} reconstruction grids to {out_dir}")


def _threads(args):
    return threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value run config (INI sections)")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cvad", description="Cascade-VAE anomaly detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render the synthetic ID/OOD dataset")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="two-stage training + calibration")
    s.add_argument("data_dir")
    s.add_argument("out_ckpt")
    s.add_argument("--stage", choices=("generator", "full"), default="full")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], help="anomaly scores for a test manifest or image folder")
    s.add_argument("ckpt")
    s.add_argument("data", help="dataset directory with manifest.csv, or a folder of images")
    s.add_argument("--mode", choices=scoring.MODES)
    s.add_argument("--out", default="scores.csv")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", parents=[common], help="per-role AUROC/TPR/FPR with bootstrap std")
    s.add_argument("scores")
    s.add_argument("--rounds", type=int)
    s.add_argument("--out", default="report.csv")
    s.add_argument("--plot", action="store_true", help="also write a ROC plot next to the report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("recon", parents=[common], help="4-panel reconstruction grids")
    s.add_argument("ckpt")
    s.add_argument("images", help="image file or folder")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_recon)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args.config, args.preset, args.seed)
        args.func(args, cfg)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, StateError, DimensionError) as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except MetricError as exc:
        print(f"metric error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
