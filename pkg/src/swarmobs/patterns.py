"""Pattern quantifiers and the discrete/continuum comparison pipeline.

* :func:`dft_pattern_sizes` reads band sizes off the 2-D DFT of a density.
* :func:`compare` puts a continuum density and a particle cloud on a common
  PIC grid (chosen by :func:`optimal_grid`), compresses both into value
  histograms (:func:`signature`) and measures the Earth Mover's Distance
  between them (:func:`emd`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import DegenerateField, EmptyCandidates
from .sampling import sample_points

__all__ = [
    "Signature", "ComparisonReport", "OptimalGrid", "sample_points", "pic_deposit",
    "interpolate_periodic", "optimal_grid", "default_candidates", "signature", "emd",
    "emd_lp", "dft_pattern_sizes", "compare", "l2_distance",
]


# --------------------------------------------------------------------------
# PIC deposition and grid selection

def _grid_size(h: float, L: float) -> int:
    n = int(round(L / h))
    if n < 1 or abs(n * h - L) > 1e-9 * L:
        raise ValueError(f"grid spacing {h} does not divide the domain length {L}")
    return n


def pic_deposit(points: np.ndarray, h: float, L: float = 1.0) -> np.ndarray:
    """Cloud-in-cell density of ``points`` on the periodic node grid of spacing ``h``.

    Each point spreads unit weight bilinearly over the four surrounding
    nodes; the result is scaled so that ``sum(rho) * h**2 == 1``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = _grid_size(h, L)
    hh = L / n
    rho = np.zeros((n, n))
    if pts.shape[0] == 0:
        raise ValueError("no points to deposit")
    g = np.mod(pts, L) / hh
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    i0 %= n
    i1 = (i0 + 1) % n
    wx0, wy0 = 1.0 - f[:, 0], 1.0 - f[:, 1]
    wx1, wy1 = f[:, 0], f[:, 1]
    np.add.at(rho, (i0[:, 0], i0[:, 1]), wx0 * wy0)
    np.add.at(rho, (i1[:, 0], i0[:, 1]), wx1 * wy0)
    np.add.at(rho, (i0[:, 0], i1[:, 1]), wx0 * wy1)
    np.add.at(rho, (i1[:, 0], i1[:, 1]), wx1 * wy1)
    return rho / (rho.sum() * hh * hh)


def interpolate_periodic(grid: np.ndarray, n_target: int) -> np.ndarray:
    """Bilinear interpolation of a periodic node grid onto ``n_target`` nodes per side."""
    n = grid.shape[0]
    x = np.arange(n_target) * (n / n_target)
    i0 = np.floor(x).astype(np.int64)
    f = x - i0
    i0 %= n
    i1 = (i0 + 1) % n
    a = grid[i0][:, i0] * (1 - f)[None, :] + grid[i0][:, i1] * f[None, :]
    b = grid[i1][:, i0] * (1 - f)[None, :] + grid[i1][:, i1] * f[None, :]
    return a * (1 - f)[:, None] + b * f[:, None]


def l2_distance(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """Discrete ``l2`` distance ``sqrt(h^2 sum |a - b|^2)``."""
    return float(math.sqrt(h * h * np.sum((a - b) ** 2)))


def default_candidates(L: float = 1.0) -> list[float]:
    """Spacings ``L/N_PIC`` for ``N_PIC = 8, 12, ..., 148``."""
    return [L / n for n in range(8, 151, 4)]


@dataclass
class OptimalGrid:
    h_tilde: float
    errors: dict[float, float]  # h -> squared l2 error on the fine grid
    points: np.ndarray


def optimal_grid(rho_macro: np.ndarray, N: int, seed, candidates=None, L: float = 1.0) -> OptimalGrid:
    """PIC spacing that best reproduces ``rho_macro`` from ``N`` sampled points.

    The points are drawn once; for each candidate ``h`` the deposited density
    is interpolated back onto the ``rho_macro`` grid and compared with
    ``dx^2 sum |.|^2``. Ties go to the first candidate.
    """
    cand = default_candidates(L) if candidates is None else list(candidates)
    if not cand:
        raise EmptyCandidates("no candidate grid spacings")
    n_fine = rho_macro.shape[0]
    dx = L / n_fine
    pts = sample_points(rho_macro, N, seed, L)
    errors = {}
    for h in cand:
        dep = pic_deposit(pts, h, L)
        back = interpolate_periodic(dep, n_fine)
        errors[h] = float(dx * dx * np.sum((back - rho_macro) ** 2))
    best = min(cand, key=lambda h: errors[h])
    return OptimalGrid(best, errors, pts)


# --------------------------------------------------------------------------
# signatures and EMD

@dataclass(frozen=True)
class Signature:
    """Histogram ``{(p_k, w_k)}`` of grid values with ``p_k = k M / n_b``."""

    p: np.ndarray
    w: np.ndarray
    M_max: float

    @property
    def n_b(self) -> int:
        return len(self.p)

    @property
    def bins(self) -> list[tuple[float, float]]:
        return list(zip(self.p.tolist(), self.w.tolist()))

    @property
    def total(self) -> float:
        return float(self.w.sum())


def freedman_diaconis_bins(values: np.ndarray, M: float, exponent: float = -1.0 / 3.0) -> int:
    """Bin count on ``[0, M]`` for width ``2 IQR n^exponent`` (Sturges when IQR = 0)."""
    n = values.size
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    if iqr <= 0:
        return int(math.ceil(math.log2(n))) + 1
    width = 2.0 * iqr * n ** exponent
    return max(1, int(math.ceil(M / width)))


def signature(rho: np.ndarray, n_b: int | None = None, fd_exponent: float = -1.0 / 3.0) -> Signature:
    """Signature of a grid density.

    Cells with value in ``(p_{k-1}, p_k]`` count towards bin ``k``; the first
    bin is ``[0, p_1]`` and also takes any negative values.
    """
    vals = np.asarray(rho, dtype=float).ravel()
    if vals.size == 0:
        raise DegenerateField("empty field")
    M = float(vals.max())
    if not M > 0:
        raise DegenerateField("maximum density is not positive")
    if n_b is None:
        n_b = freedman_diaconis_bins(vals, M, fd_exponent)
    if n_b < 1:
        raise ValueError("n_b must be >= 1")
    p = np.arange(1, n_b + 1) * (M / n_b)
    p[-1] = M
    idx = np.searchsorted(p, vals, side="left")
    idx = np.clip(idx, 0, n_b - 1)
    w = np.bincount(idx, minlength=n_b).astype(float)
    return Signature(p, w, M)


def emd_lp(P: Signature, Q: Signature) -> float:
    """EMD as the transportation LP: partial flows bounded by both weight sets,
    total flow ``min(sum w_P, sum w_Q)``, cost ``|p_k - q_l|``."""
    m, n = P.n_b, Q.n_b
    d = np.abs(P.p[:, None] - Q.p[None, :]).ravel()
    A_ub = np.zeros((m + n, m * n))
    for i in range(m):
        A_ub[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_ub[m + j, j::n] = 1.0
    b_ub = np.concatenate([P.w, Q.w])
    total = min(P.total, Q.total)
    res = optimize.linprog(d, A_ub=A_ub, b_ub=b_ub, A_eq=np.ones((1, m * n)), b_eq=[total],
                           bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"EMD linear program failed: {res.message}")
    return float(res.fun / total)


def emd(P: Signature, Q: Signature, rtol: float = 1e-12) -> float:
    """Earth Mover's Distance between two signatures.

    With equal total weights the optimal flow of a 1-D ground metric is the
    monotone coupling, so the cost is the area between the two cumulative
    weight curves divided by the total; otherwise the LP is solved.
    """
    WP, WQ = P.total, Q.total
    if not (WP > 0 and WQ > 0):
        raise DegenerateField("signature with zero total weight")
    if abs(WP - WQ) > rtol * max(WP, WQ):
        return emd_lp(P, Q)
    x = np.concatenate([P.p, Q.p])
    order = np.argsort(x, kind="stable")
    dw = np.concatenate([P.w, -Q.w])[order]
    xs = x[order]
    cum = np.cumsum(dw)[:-1]
    return float(np.sum(np.abs(cum) * np.diff(xs)) / WP)


# --------------------------------------------------------------------------
# DFT pattern sizes

def dft_pattern_sizes(rho: np.ndarray, Omega0=(math.cos(math.pi / 4), math.sin(math.pi / 4)),
                      angle_tol: float = math.radians(10.0), L: float = 1.0,
                      floor_factor: float = 3.0, min_rel_amplitude: float = 1e-3):
    """Dominant pattern sizes ``(S1, S2)`` along ``Omega0`` and ``Omega0_perp``.

    The modulus of the DFT is taken over all nonzero integer modes. For each
    direction the modes within ``angle_tol`` of that axis (either sign) are
    searched for the strongest one, giving ``S = L / |(a, b)|``. ``S = 0``
    when that peak does not exceed ``floor_factor`` times the mean modulus
    over all nonzero modes, or when its amplitude relative to the mean
    density is below ``min_rel_amplitude``. Ties go to the smaller ``|k|``.
    """
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[0]
    spec = np.abs(np.fft.fft2(rho))
    a = np.fft.fftfreq(n, 1.0 / n)
    A, B = np.meshgrid(a, a, indexing="ij")
    kn = np.hypot(A, B)
    nonzero = kn > 0
    floor = spec[nonzero].mean()
    mean = abs(rho.mean()) * n * n
    ox, oy = Omega0
    nrm = math.hypot(ox, oy)
    ox, oy = ox / nrm, oy / nrm
    cos_tol = math.cos(angle_tol)
    out = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for dx, dy in ((ox, oy), (-oy, ox)):
            cosang = np.abs(A * dx + B * dy) / kn
            cone = nonzero & (cosang >= cos_tol - 1e-12)
            if not np.any(cone):
                out.append(0.0)
                continue
            vals = np.where(cone, spec, -np.inf)
            peak = vals.max()
            # smallest |k| among the maximal modes
            cand = np.flatnonzero(vals.ravel() == peak)
            best = cand[np.argmin(kn.ravel()[cand])]
            if peak <= floor_factor * floor or peak <= min_rel_amplitude * mean:
                out.append(0.0)
            else:
                out.append(L / kn.ravel()[best])
    return out[0], out[1]


# --------------------------------------------------------------------------
# comparison pipeline

@dataclass
class ComparisonReport:
    h_tilde: float
    emd: float
    l2: float
    N_used: int
    n_b_macro: int
    n_b_micro: int
    errors: dict = field(default_factory=dict, repr=False)

    @property
    def n_b_mismatch(self) -> bool:
        """True when the two bin counts differ by more than a factor 2."""
        lo, hi = sorted((self.n_b_macro, self.n_b_micro))
        return hi > 2 * lo

    CSV_COLUMNS = ("params_hash", "epsilon", "N", "h_tilde", "emd", "l2")

    def to_row(self, params_hash: str, epsilon: float) -> dict:
        return {"params_hash": params_hash, "epsilon": epsilon, "N": self.N_used,
                "h_tilde": self.h_tilde, "emd": self.emd, "l2": self.l2}


class StageError(RuntimeError):
    """A comparison stage failed; ``stage`` names it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.__cause__ = exc


def compare(macro, micro, N: int, seed, candidates=None, n_b: int | None = None) -> ComparisonReport:
    """Distance between a continuum field and a particle snapshot.

    ``macro`` is a :class:`~swarmobs.pde.MacroField` and ``micro`` a
    :class:`~swarmobs.ibm.ParticleState`; only agent positions are used.
    """
    L = macro.L
    try:
        grid = optimal_grid(macro.rho, N, seed, candidates, L)
    except Exception as exc:
        raise StageError("optimal_grid", exc) from exc
    h = grid.h_tilde
    try:
        rho_mac = pic_deposit(grid.points, h, L)
        rho_mic = pic_deposit(micro.Z, h, L)
    except Exception as exc:
        raise StageError("pic_deposit", exc) from exc
    try:
        sm = signature(rho_mac, n_b)
        si = signature(rho_mic, n_b)
    except Exception as exc:
        raise StageError("signature", exc) from exc
    try:
        d = emd(sm, si)
    except Exception as exc:
        raise StageError("emd", exc) from exc
    return ComparisonReport(h, d, l2_distance(rho_mac, rho_mic, L / rho_mac.shape[0]),
                            int(micro.Z.shape[0]), sm.n_b, si.n_b, grid.errors)
