"""Two-stage training (generator, then a frozen-generator discriminator),
score calibration and the binary checkpoint format.

Checkpoint layout::

    b"CVADCKPT" | u32 version | u64 header length | JSON header | f32 payload

All integers and floats are little-endian.  The JSON header carries the
configs, stage, epoch, calibration and a tensor directory (name, shape,
dtype, byte offset into the payload) sorted by name.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses, models, nn
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError, StateError

log = logging.getLogger(__name__)

MAGIC = b"CVADCKPT"
FORMAT_VERSION = 1
LOG_HEADER = ["epoch", "split", "loss_total", "recon1", "kl1", "recon2", "kl2", "disc_acc"]
EVAL_CHUNK = 128


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @property
    def weights(self):
        return losses.LossWeights(self.alpha1, self.alpha2)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    arch: models.ArchConfig
    train: TrainConfig
    stage: str
    epoch: int
    generator: models.GeneratorParams
    discriminator: models.DiscriminatorParams | None = None
    calibration: tuple | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.stage not in ("generator", "full"):
            raise CheckpointError(f"unknown stage {self.stage!r}")
        if self.stage == "full" and self.discriminator is None:
            raise CheckpointError("a full checkpoint needs discriminator parameters")
        if self.calibration is not None:
            lo, hi = self.calibration
            if lo > hi:
                raise CheckpointError(f"calibration min {lo} exceeds max {hi}")

    def tensors(self):
        out = {f"gen.{k}": v for k, v in self.generator.tensors().items()}
        if self.discriminator is not None:
            out.update({f"disc.{k}": v for k, v in self.discriminator.tensors().items()})
        return out


def expected_tensor_names(arch, stage):
    names = [f"gen.{n}" for n in models.expected_names(arch, "generator")]
    if stage == "full":
        names += [f"disc.{n}" for n in models.expected_names(arch, "discriminator")]
    return sorted(names)


def _header(ckpt):
    directory, offset = [], 0
    tensors = ckpt.tensors()
    for name in sorted(tensors):
        arr = tensors[name]
        directory.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        offset += arr.size * 4
    cal = None
    if ckpt.calibration is not None:
        cal = {"L_G_min": float(ckpt.calibration[0]), "L_G_max": float(ckpt.calibration[1])}
    header = {
        "format_version": FORMAT_VERSION,
        "arch": ckpt.arch.to_dict(),
        "train": asdict(ckpt.train),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "calibration": cal,
        "seed": ckpt.train.seed,
        "loss_reduction": losses.REDUCTION,
        "config_hash": ckpt.config_hash,
        "tensors": directory,
    }
    return header, tensors


def checkpoint_bytes(ckpt):
    header, tensors = _header(ckpt)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(tensors[t["name"]], dtype="<f4").tobytes() for t in header["tensors"]]
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    data = checkpoint_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a CVAD checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 20 + hlen
    try:
        header = json.loads(data[20:start].decode("utf-8"))
        arch = models.ArchConfig.from_dict(header["arch"])
        train = TrainConfig.from_dict(header["train"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    stage = header["stage"]
    names = [t["name"] for t in header["tensors"]]
    if names != expected_tensor_names(arch, stage):
        missing = set(expected_tensor_names(arch, stage)) ^ set(names)
        raise CheckpointError(f"{path}: tensor directory does not match the arch config: {sorted(missing)[:5]}")
    shapes = {n: s for n, s, *_ in _shape_table(arch, stage)}
    arrays = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        if shape != shapes[t["name"]]:
            raise CheckpointError(f"{path}: {t['name']} has shape {shape}, expected {shapes[t['name']]}")
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start + t["offset"])
        arrays[t["name"]] = arr.reshape(shape).astype(np.float32)
    gen = _paramset(models.GeneratorParams, arch, "generator", arrays, "gen.")
    disc = _paramset(models.DiscriminatorParams, arch, "discriminator", arrays, "disc.") if stage == "full" else None
    cal = header.get("calibration")
    cal = None if cal is None else (cal["L_G_min"], cal["L_G_max"])
    return Checkpoint(arch, train, stage, header["epoch"], gen, disc, cal, header.get("config_hash", ""))


def _shape_table(arch, stage):
    rows = [(f"gen.{n}", s) for n, s, *_ in models.tensor_table(arch, "generator")]
    if stage == "full":
        rows += [(f"disc.{n}", s) for n, s, *_ in models.tensor_table(arch, "discriminator")]
    return rows


def _paramset(cls, arch, kind, arrays, prefix):
    params, buffers = {}, {}
    for name, _, role, _ in models.tensor_table(arch, kind):
        (buffers if role.startswith("buffer") else params)[name] = arrays[prefix + name]
    return cls(arch, params, buffers)


# ---------------------------------------------------------------------------
# helpers


def _maybe_single_thread(deterministic):
    return threadpool_limits(limits=1) if deterministic else contextlib.nullcontext()


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = np.sort(perm[i:i + batch_size])
        if len(idx) >= 2:
            yield idx


def evaluate_generator(gp, x, weights, chunk=EVAL_CHUNK):
    """Per-sample loss terms in posterior-mean, eval-mode inference."""
    parts = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        out = models.generator_forward(xb, gp)
        parts.append(losses.generator_loss(out, xb, weights))
    return losses.PerSampleLoss(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                  ("recon1", "kl1", "recon2", "kl2", "total")))


def reconstruct(gp, x, chunk=EVAL_CHUNK):
    return np.concatenate([models.generator_forward(x[i:i + chunk], gp).x_recon
                           for i in range(0, len(x), chunk)])


def discriminator_probs(dp, x, chunk=EVAL_CHUNK):
    return np.concatenate([models.discriminator_forward(x[i:i + chunk], dp)[:, 0]
                           for i in range(0, len(x), chunk)])


def discriminator_accuracy(dp, real, fake):
    """Fraction classified correctly with ``p > 0.5`` meaning reconstruction."""
    pr, pf = discriminator_probs(dp, real), discriminator_probs(dp, fake)
    return float((np.sum(pr <= 0.5) + np.sum(pf > 0.5)) / (len(pr) + len(pf)))


def _log_row(epoch, split, terms=None, loss=None, acc=None):
    row = dict.fromkeys(LOG_HEADER, "")
    row.update(epoch=epoch, split=split)
    if terms is not None:
        for k in ("recon1", "kl1", "recon2", "kl2"):
            row[k] = float(np.mean(terms[k]))
        row["loss_total"] = float(np.mean(terms["total"]))
    if loss is not None:
        row["loss_total"] = float(loss)
    if acc is not None:
        row["disc_acc"] = float(acc)
    return row


def write_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, LOG_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _check_data(x, arch, what):
    if len(x) == 0:
        raise DatasetError(f"{what} set is empty")
    if x.shape[1:] != (arch.in_channels, arch.image_size, arch.image_size):
        raise DatasetError(f"{what} images have shape {x.shape[1:]}, arch expects "
                           f"{(arch.in_channels, arch.image_size, arch.image_size)}")


# ---------------------------------------------------------------------------
# stage 1


def train_generator(train_x, val_x, arch, cfg, deterministic=False, history=None, config_hash=""):
    """Minimise the batch-mean generator loss with Adam on ID training images.

    Returns a ``stage="generator"`` checkpoint.  Per-epoch log rows (train
    losses averaged over batches, validation losses in posterior-mean mode)
    are appended to ``history`` when given.
    """
    _check_data(train_x, arch, "training")
    _check_data(val_x, arch, "validation")
    if len(train_x) < 2:
        raise DatasetError("need at least 2 training images (batch norm)")
    history = [] if history is None else history
    gp = models.init_generator(arch, np.random.default_rng([cfg.seed, 0]))
    opt = nn.AdamState(lr=cfg.lr)
    w = cfg.weights
    with _maybe_single_thread(deterministic):
        for epoch in range(1, cfg.epochs_stage1 + 1):
            rng = np.random.default_rng([cfg.seed, 1, epoch])
            sums = dict.fromkeys(("recon1", "kl1", "recon2", "kl2", "total"), 0.0)
            count = 0
            for b, idx in enumerate(_batches(len(train_x), cfg.batch_size, rng)):
                xb = train_x[idx]
                eps1 = rng.standard_normal((len(idx), arch.latent_dim), dtype=np.float32)
                eps2 = rng.standard_normal((len(idx), arch.branch_latent_dim), dtype=np.float32) \
                    if arch.branch_enabled else None
                tape, updates = {}, {}
                out = models.generator_forward(xb, gp, eps1, eps2, train=True, tape=tape, updates=updates)
                terms = losses.generator_loss(out, xb, w)
                if not np.all(np.isfinite(terms.total)):
                    raise DivergenceError(f"non-finite generator loss at epoch {epoch}, batch {b}")
                grads = models.generator_backward(gp, tape, losses.generator_loss_grad(out, xb, w))
                nn.adam_step(gp.params, grads, opt)
                gp.buffers.update(updates)
                for k in sums:
                    sums[k] += float(getattr(terms, k).sum())
                count += len(idx)
            history.append(_log_row(epoch, "train", {k: v / count for k, v in sums.items()}))
            val = evaluate_generator(gp, val_x, w)
            if not np.all(np.isfinite(val.total)):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            history.append(_log_row(epoch, "val", vars(val)))
            log.info("stage 1 epoch %d: train L_G %.2f  val L_G %.2f",
                     epoch, history[-2]["loss_total"], history[-1]["loss_total"])
    return Checkpoint(arch, cfg, "generator", cfg.epochs_stage1, gp, config_hash=config_hash)


# ---------------------------------------------------------------------------
# stage 2


def train_discriminator(ckpt, train_x, val_x, cfg=None, deterministic=False, history=None, zero_init=False):
    """Train the real-vs-reconstruction classifier against a frozen generator.

    Reconstructions are posterior-mean outputs of the stage-1 generator and
    carry target 1; real images carry target 0.  Returns a ``stage="full"``
    checkpoint sharing the (untouched) generator parameters.
    """
    if ckpt.stage not in ("generator", "full"):
        raise StateError("stage 2 needs a generator checkpoint")
    cfg = cfg or ckpt.train
    arch = ckpt.arch
    _check_data(train_x, arch, "training")
    _check_data(val_x, arch, "validation")
    history = [] if history is None else history
    gp = ckpt.generator
    dp = models.init_discriminator(arch, np.random.default_rng([cfg.seed, 2]), zero=zero_init)
    opt = nn.AdamState(lr=cfg.lr)
    with _maybe_single_thread(deterministic):
        fake_train = reconstruct(gp, train_x)
        fake_val = reconstruct(gp, val_x)
        for epoch in range(1, cfg.epochs_stage2 + 1):
            rng = np.random.default_rng([cfg.seed, 3, epoch])
            loss_sum, correct, seen = 0.0, 0, 0
            for b, idx in enumerate(_batches(len(train_x), cfg.batch_size, rng)):
                xb = np.concatenate([train_x[idx], fake_train[idx]])
                tape, updates = {}, {}
                logits = models.discriminator_logits(xb, dp, train=True, tape=tape, updates=updates)
                n = len(idx)
                loss, dr, df = losses.discriminator_loss_logits(logits[:n], logits[n:])
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite discriminator loss at epoch {epoch}, batch {b}")
                grads = models.discriminator_backward(dp, tape, np.concatenate([dr, df]))
                nn.adam_step(dp.params, grads, opt)
                dp.buffers.update(updates)
                loss_sum += loss * 2 * n
                correct += int(np.sum(logits[:n] <= 0) + np.sum(logits[n:] > 0))
                seen += 2 * n
            history.append(_log_row(epoch, "disc_train", loss=loss_sum / seen, acc=correct / seen))
            acc = discriminator_accuracy(dp, val_x, fake_val)
            history.append(_log_row(epoch, "disc_val", acc=acc))
            log.info("stage 2 epoch %d: train acc %.3f  val acc %.3f", epoch, correct / seen, acc)
    return Checkpoint(arch, cfg, "full", cfg.epochs_stage2, gp, dp, None, ckpt.config_hash)


def calibrate(ckpt, val_x):
    """Store min/max of the per-sample generator loss over validation ID images."""
    if ckpt.stage != "full":
        raise StateError("calibration needs a full checkpoint")
    if len(val_x) == 0:
        raise DatasetError("calibration set is empty")
    total = evaluate_generator(ckpt.generator, val_x, ckpt.train.weights).total.astype(np.float64)
    return replace(ckpt, calibration=(float(total.min()), float(total.max())))
