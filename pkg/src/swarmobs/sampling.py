"""Drawing point clouds from grid densities."""

from __future__ import annotations

import numpy as np


def sample_points(rho: np.ndarray, N: int, seed, L: float = 1.0) -> np.ndarray:
    """Draw ``N`` points distributed according to the node-sampled density ``rho``.

    Node ``(i, j)`` sits at ``(i h, j h)`` and owns the cell of side ``h``
    centred on it. A cell is picked with probability proportional to its
    value (inverse CDF over the flattened grid), then the point is placed
    uniformly inside the cell and wrapped into ``[0, L)^2``. Negative values
    are treated as zero.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("rho must be a square 2-D grid")
    w = np.clip(rho, 0.0, None).ravel()
    total = w.sum()
    if not total > 0:
        raise ValueError("density has no positive mass")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = rho.shape[0]
    h = L / n
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = rng.random(N)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, w.size - 1)
    i, j = np.divmod(idx, n)
    off = rng.random((N, 2)) - 0.5
    pts = np.column_stack((i + off[:, 0], j + off[:, 1])) * h
    pts = np.mod(pts, L)
    pts[pts >= L] -= L
    return pts
