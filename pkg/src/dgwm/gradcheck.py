"""Central finite differences, used as the independent check on backward()."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_grad(
    fn: Callable[[], float],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords: dict[int, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Estimate d fn / d p for every entry of every tensor in ``params``.

    ``fn`` takes no arguments and reads the current ``params`` values, so
    it can close over any model. Each entry is perturbed by +/- ``eps`` in
    place and restored. ``coords`` optionally restricts tensor ``i`` to a
    subset of flat indices; skipped entries come back as NaN.
    """
    out = []
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        grad = np.zeros(flat.shape)
        idx = range(flat.size) if coords is None or i not in coords else coords[i]
        if coords is not None and i in coords:
            grad[:] = np.nan
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(fn())
            flat[j] = orig - eps
            lo = float(fn())
            flat[j] = orig
            grad[j] = (hi - lo) / (2.0 * eps)
        out.append(grad.reshape(p.shape))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes.

    Entries marked NaN in ``numeric`` (not evaluated) are ignored.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    keep = ~np.isnan(n)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)
