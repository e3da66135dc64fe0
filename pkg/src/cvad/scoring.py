"""Anomaly scores: normalized generator loss averaged with the discriminator's
OOD probability, ``S = 0.5 * (S_G + S_D)``.

``S_G`` is the per-sample generator loss min-max scaled either over the
scored set itself (``mode="dataset"``) or with the validation statistics
stored at calibration time (``mode="calibrated"``, clamped to [0, 1]).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import models, nn
from .errors import StateError
from .training import EVAL_CHUNK, evaluate_generator

SCORE_HEADER = ["sample_id", "label", "role", "L_G", "S_G", "S_D", "S"]
MODES = ("dataset", "calibrated")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    L_G: float
    L_norm: float
    S_D: float
    S: float


def reconstruction_error(ckpt, batch):
    """Per-sample generator loss (reconstruction + KL terms), noise-free."""
    return evaluate_generator(ckpt.generator, batch, ckpt.train.weights).total.astype(np.float64)


def discriminator_score(ckpt, batch):
    if ckpt.discriminator is None:
        raise StateError("scoring with S_D needs a full checkpoint")
    logits = np.concatenate([models.discriminator_logits(batch[i:i + EVAL_CHUNK], ckpt.discriminator)[:, 0]
                             for i in range(0, len(batch), EVAL_CHUNK)])
    return nn.sigmoid(logits.astype(np.float64))


def normalize(l_g, mode, calibration=None):
    l_g = np.asarray(l_g, dtype=np.float64)
    if mode == "dataset":
        lo, hi = (l_g.min(), l_g.max()) if l_g.size else (0.0, 0.0)
    elif mode == "calibrated":
        if calibration is None:
            raise StateError("calibrated scoring requires a calibrated checkpoint")
        lo, hi = calibration
    else:
        raise ValueError(f"unknown score mode {mode!r}")
    if hi <= lo:
        # degenerate range: every sample counts as in-distribution
        return np.zeros_like(l_g)
    return np.clip((l_g - lo) / (hi - lo), 0.0, 1.0)


def combine(s_g, s_d):
    return 0.5 * (np.asarray(s_g, dtype=np.float64) + np.asarray(s_d, dtype=np.float64))


def ablation_scores(ckpt, batch, mode="dataset"):
    """``(S_G, S_D, S)`` per sample, plus the raw ``L_G`` as a fourth element."""
    if mode == "calibrated" and ckpt.calibration is None:
        raise StateError("calibrated scoring requires a calibrated checkpoint")
    s_d = discriminator_score(ckpt, batch)
    l_g = reconstruction_error(ckpt, batch)
    s_g = normalize(l_g, mode, ckpt.calibration)
    return s_g, s_d, combine(s_g, s_d), l_g


def score_batch(ckpt, batch, mode="dataset", sample_ids=None):
    s_g, s_d, s, l_g = ablation_scores(ckpt, batch, mode)
    ids = sample_ids if sample_ids is not None else [str(i) for i in range(len(batch))]
    return [ScoreRecord(str(i), float(a), float(b), float(c), float(d))
            for i, a, b, c, d in zip(ids, l_g, s_g, s_d, s)]


def write_scores(path, sample_ids, labels, roles, l_g, s_g, s_d, s):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for row in zip(sample_ids, labels, roles, l_g, s_g, s_d, s):
            sid, lab, role, *vals = row
            w.writerow([sid, int(lab), role] + [repr(float(v)) for v in vals])


def read_scores(path):
    """Return a dict of columns; numeric columns as float64 / int arrays."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SCORE_HEADER)}, got {header}")
        rows = list(reader)
    cols = {name: [r[i] for r in rows] for i, name in enumerate(SCORE_HEADER)}
    out = {"sample_id": cols["sample_id"], "role": cols["role"],
           "label": np.array([int(v) for v in cols["label"]], dtype=int)}
    for name in ("L_G", "S_G", "S_D", "S"):
        out[name] = np.array([float(v) for v in cols[name]], dtype=np.float64)
    return out
