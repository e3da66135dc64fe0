"""ROC analysis with the decision rule ``score >= threshold => OOD``.

Labels are 0 for in-distribution and 1 for OOD.  Tied scores are grouped
into one curve point, so the trapezoidal AUROC equals the Mann-Whitney
statistic with half credit for ties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import MetricError

REPORT_HEADER = ["score", "ood_role", "auc_mean", "auc_std", "tpr", "tpr_std", "fpr", "fpr_std", "threshold"]
GMEAN_TIE_TOL = 1e-12


@dataclass(frozen=True)
class RocCurve:
    """Curve points ordered by increasing threshold, endpoints included."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError("labels must be 0 (ID) or 1 (OOD)")
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise MetricError("ROC analysis needs both ID and OOD samples")
    return scores, labels.astype(int)


def roc_curve(scores, labels):
    scores, labels = _validate(scores, labels)
    values, inverse = np.unique(scores, return_inverse=True)
    pos = np.bincount(inverse, weights=labels, minlength=values.size)
    neg = np.bincount(inverse, weights=1 - labels, minlength=values.size)
    # counts with score >= each distinct value
    tp = np.cumsum(pos[::-1])[::-1]
    fp = np.cumsum(neg[::-1])[::-1]
    n_pos, n_neg = labels.sum(), labels.size - labels.sum()
    thresholds = np.concatenate([[-np.inf], values, [np.inf]])
    tpr = np.concatenate([[1.0], tp / n_pos, [0.0]])
    fpr = np.concatenate([[1.0], fp / n_neg, [0.0]])
    return RocCurve(thresholds, fpr, tpr)


def auc_from_curve(curve):
    dx = curve.fpr[:-1] - curve.fpr[1:]
    return float(np.sum(dx * (curve.tpr[:-1] + curve.tpr[1:]) * 0.5))


def auroc(scores, labels):
    return auc_from_curve(roc_curve(scores, labels))


def gmean_threshold(curve):
    """Curve point maximising ``sqrt(TPR * (1 - FPR))``.

    Ties go to the lowest FPR, then the lowest threshold.  Returns
    ``(threshold, tpr, fpr)``.
    """
    g = np.sqrt(curve.tpr * (1.0 - curve.fpr))
    cand = np.flatnonzero(g >= g.max() - GMEAN_TIE_TOL)
    best = min(cand, key=lambda i: (curve.fpr[i], curve.thresholds[i]))
    return float(curve.thresholds[best]), float(curve.tpr[best]), float(curve.fpr[best])


@dataclass(frozen=True)
class BootstrapResult:
    auc: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray

    @staticmethod
    def _std(v):
        return float(np.std(v, ddof=1)) if v.size > 1 else 0.0

    @property
    def auc_mean(self):
        return float(self.auc.mean())

    @property
    def auc_std(self):
        return self._std(self.auc)

    @property
    def tpr_mean(self):
        return float(self.tpr.mean())

    @property
    def tpr_std(self):
        return self._std(self.tpr)

    @property
    def fpr_mean(self):
        return float(self.fpr.mean())

    @property
    def fpr_std(self):
        return self._std(self.fpr)


def bootstrap(scores, labels, rounds=10, seed=0):
    """Resample the pooled set with replacement ``rounds`` times.

    Each round recomputes AUROC and re-selects the G-Mean operating point.
    A resample that happens to contain a single class is redrawn.  Standard
    deviations use ``ddof=1``.
    """
    scores, labels = _validate(scores, labels)
    if rounds < 1:
        raise MetricError("rounds must be >= 1")
    rng = np.random.default_rng(seed)
    n = scores.size
    aucs, tprs, fprs = [], [], []
    while len(aucs) < rounds:
        idx = rng.integers(0, n, size=n)
        lab = labels[idx]
        if lab.min() == lab.max():
            continue
        curve = roc_curve(scores[idx], lab)
        aucs.append(auc_from_curve(curve))
        _, tpr, fpr = gmean_threshold(curve)
        tprs.append(tpr)
        fprs.append(fpr)
    return BootstrapResult(np.array(aucs), np.array(tprs), np.array(fprs))


def evaluate_roles(columns, rounds=10, seed=0, score_names=("S_G", "S_D", "S")):
    """Per-OOD-role report rows from score-file columns.

    Every role is evaluated against all ID rows (label 0).
    """
    labels = np.asarray(columns["label"])
    roles = np.asarray(columns["role"])
    id_mask = labels == 0
    ood_roles = sorted({r for r, lab in zip(roles, labels) if lab == 1})
    if not ood_roles:
        raise MetricError("score file contains no OOD rows")
    rows = []
    for role in ood_roles:
        mask = id_mask | ((roles == role) & (labels == 1))
        for name in score_names:
            s, y = np.asarray(columns[name])[mask], labels[mask]
            res = bootstrap(s, y, rounds, seed)
            threshold = gmean_threshold(roc_curve(s, y))[0]
            rows.append({
                "score": name, "ood_role": role,
                "auc_mean": res.auc_mean, "auc_std": res.auc_std,
                "tpr": res.tpr_mean, "tpr_std": res.tpr_std,
                "fpr": res.fpr_mean, "fpr_std": res.fpr_std,
                "threshold": threshold,
            })
    return rows


def write_report(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r["score"], r["ood_role"]] + [repr(float(r[k])) for k in REPORT_HEADER[2:]])


def read_report(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {reader.fieldnames}")
        return [{k: (v if k in ("score", "ood_role") else float(v)) for k, v in r.items()} for r in reader]


def plot_roc(curves, path, title="ROC"):
    """Write one PNG with a ROC line per ``{label: RocCurve}`` entry."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, c in curves.items():
        ax.plot(c.fpr[::-1], c.tpr[::-1], label=f"{label} (AUC {auc_from_curve(c):.3f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
