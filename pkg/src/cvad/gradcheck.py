"""Central finite differences for verifying hand-written backward passes."""

from __future__ import annotations

import numpy as np


def rel_error(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numerical_gradient(f, x, h=1e-6, indices=None):
    """d f() / d x by central differences, perturbing ``x`` in place.

    ``f`` takes no arguments and returns a scalar.  When ``indices`` (flat
    positions) is given, only those entries are estimated and a 1-D array is
    returned in the same order.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    out = np.asarray(out, dtype=np.float64)
    return out.reshape(x.shape) if indices is None else out
