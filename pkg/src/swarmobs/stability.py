"""Linear stability of uniform, aligned states of the continuum model.

A plane-wave perturbation ``exp(alpha t + i k.x)`` of the state
``(rho0, Omega0)`` grows at a rate given by a 2x2 eigenproblem. With
``k0 = k.Omega0`` and ``k1 = k.Omega0_perp``:

* ``k1 = 0``: two explicit roots ``alpha1 = (F - i d1 k0)/G`` and
  ``alpha2 = -i d2 k0 - |k|^2 gamma_s``;
* ``k1 != 0``: the roots of ``a alpha^2 + b alpha + c = 0`` whose
  coefficients are built in :func:`quadratic_coefficients`.

``F`` and ``G`` carry the obstacle feedback through ``phi_hat``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .alignment import AlignmentCoeffs, compute_alignment_coeffs
from .params import ModelParams
from .potentials import compute_c0, phi_hat

CASE_A1 = "CaseA1"
CASE_A2 = "CaseA2"
CASE_B = "CaseB"

# |k1| below this fraction of |k| counts as parallel to Omega0
PARALLEL_TOL = 1e-12


@dataclass(frozen=True)
class BaseState:
    rho0: float = 1.0
    Omega0: tuple[float, float] = (math.cos(math.pi / 4), math.sin(math.pi / 4))

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValueError("rho0 must be > 0")
        ox, oy = (float(v) for v in self.Omega0)
        if abs(math.hypot(ox, oy) - 1.0) > 1e-9:
            raise ValueError(f"Omega0 must be a unit vector, got {self.Omega0}")
        object.__setattr__(self, "Omega0", (ox, oy))

    @classmethod
    def at_angle(cls, angle: float, rho0: float = 1.0) -> "BaseState":
        return cls(rho0, (math.cos(angle), math.sin(angle)))

    @property
    def perp(self) -> tuple[float, float]:
        return (-self.Omega0[1], self.Omega0[0])


@dataclass(frozen=True)
class DispersionResult:
    k: tuple[float, float]
    k0: float
    k1: float
    roots: tuple[complex, ...]
    branch: str
    stable: bool
    rh1: float | None = None
    rh2: float | None = None

    @property
    def max_growth(self) -> float:
        return max(r.real for r in self.roots)


def _coeffs(params: ModelParams) -> AlignmentCoeffs:
    return compute_alignment_coeffs(params.ds_over_nu, params.rA, params.u0)


def F_of(z, params: ModelParams, rho0: float = 1.0, phat=None):
    """``F(z) = z^2 (rho0/zeta) (z^2 phi_hat^2 / kappa - mu)``."""
    z = np.asarray(z, dtype=float)
    ph = phi_hat(z, params.tau, params.Cphi) if phat is None else phat
    out = z * z * (rho0 / params.zeta) * (z * z * ph * ph / params.kappa - params.mu)
    return float(out) if out.ndim == 0 else out


def G_of(z, params: ModelParams, rho0: float = 1.0, phat=None):
    """``G(z) = 1 + rho0 eta z^4 phi_hat^2 / (kappa^2 zeta)``."""
    z = np.asarray(z, dtype=float)
    ph = phi_hat(z, params.tau, params.Cphi) if phat is None else phat
    out = 1.0 + rho0 * params.eta / (params.kappa ** 2 * params.zeta) * z ** 4 * ph * ph
    return float(out) if out.ndim == 0 else out


def quadratic_coefficients(k0, k1, F, G, c: AlignmentCoeffs):
    """Coefficients ``(a, b, c)`` of the general-direction growth-rate quadratic."""
    k2 = k0 * k0 + k1 * k1
    gs = c.gamma_s
    a = G + 0j
    b = G * k2 * gs - F + 1j * k0 * (G * c.d2 + c.d1)
    cc = c.d1 * (c.d3 * k1 * k1 - c.d2 * k0 * k0) - k2 * gs * F \
        + 1j * (c.d1 * k0 * k2 * gs - c.d2 * k0 * F)
    return a, b, cc


def quadratic_roots(a, b, c):
    """Both roots of ``a x^2 + b x + c`` with cancellation-free evaluation."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    c = np.asarray(c, dtype=complex)
    s = np.sqrt(b * b - 4.0 * a * c)
    s = np.where((np.conj(b) * s).real < 0, -s, s)
    q = -0.5 * (b + s)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(q != 0, q / a, 0.0)
        r2 = np.where(q != 0, c / np.where(q != 0, q, 1.0), 0.0)
    return r1, r2


def routh_hurwitz(k0, k1, F, G, c: AlignmentCoeffs):
    """Return ``(RH1, RH2)``; both positive iff both roots have Re < 0."""
    k2 = k0 * k0 + k1 * k1
    gs = c.gamma_s
    B = G * k2 * gs - F
    rh2 = B * B * c.d1 * c.d3 * k1 * k1 \
        - gs * F * k2 * ((c.d1 - c.d2 * G) ** 2 * k0 * k0 + B * B)
    return B, rh2


def dispersion(k, params: ModelParams, base: BaseState = BaseState(),
               coeffs: AlignmentCoeffs | None = None) -> DispersionResult:
    """Growth rates of the plane wave with wave vector ``k``."""
    kx, ky = float(k[0]), float(k[1])
    c = coeffs or _coeffs(params)
    ox, oy = base.Omega0
    k0 = kx * ox + ky * oy
    k1 = -kx * oy + ky * ox
    z = math.hypot(kx, ky)
    ph = phi_hat(z, params.tau, params.Cphi)
    F = F_of(z, params, base.rho0, ph)
    G = G_of(z, params, base.rho0, ph)
    if abs(k1) <= PARALLEL_TOL * z or z == 0.0:
        a1 = complex(F / G, -c.d1 * k0 / G)
        a2 = complex(-z * z * c.gamma_s, -c.d2 * k0)
        branch = CASE_A1 if a1.real >= a2.real else CASE_A2
        stable = a1.real < 0 and a2.real < 0
        return DispersionResult((kx, ky), k0, k1, (a1, a2), branch, stable)
    a, b, cc = quadratic_coefficients(k0, k1, F, G, c)
    r1, r2 = quadratic_roots(a, b, cc)
    rh1, rh2 = routh_hurwitz(k0, k1, F, G, c)
    roots = tuple(sorted((complex(r1), complex(r2)), key=lambda r: -r.real))
    return DispersionResult((kx, ky), k0, k1, roots, CASE_B, bool(rh1 > 0 and rh2 > 0),
                            float(rh1), float(rh2))


def bifurcation_parameter(params: ModelParams) -> float:
    """``b_p = mu kappa / c0``; uniform states are unstable iff ``b_p < 1``."""
    if params.mu == 0.0:
        return 0.0
    c0, _ = compute_c0(params.tau, params.Cphi)
    if c0 == 0.0:
        return math.inf
    return params.mu * params.kappa / c0


# --------------------------------------------------------------------------
# directional growth curves

def growth_parallel(z, params: ModelParams, rho0: float = 1.0, coeffs=None):
    """``Re alpha1`` for ``k = z Omega0`` (the direction does not matter)."""
    z = np.asarray(z, dtype=float)
    ph = phi_hat(z, params.tau, params.Cphi)
    return F_of(z, params, rho0, ph) / G_of(z, params, rho0, ph)


def growth_perpendicular(z, params: ModelParams, rho0: float = 1.0, coeffs=None):
    """Largest ``Re alpha`` for ``k = z Omega0_perp``."""
    c = coeffs or _coeffs(params)
    z = np.asarray(z, dtype=float)
    ph = phi_hat(z, params.tau, params.Cphi)
    F = F_of(z, params, rho0, ph)
    G = G_of(z, params, rho0, ph)
    a, b, cc = quadratic_coefficients(np.zeros_like(z), z, F, G, c)
    r1, r2 = quadratic_roots(a, b, cc)
    out = np.maximum(r1.real, r2.real)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PatternPrediction:
    """Predicted band sizes; unpacks as ``(S1th, S2th, alpha_par_max, alpha_perp_max)``."""

    S1th: float
    S2th: float
    alpha_par_max: float
    alpha_perp_max: float
    k_par: float
    k_perp: float

    def __iter__(self):
        return iter((self.S1th, self.S2th, self.alpha_par_max, self.alpha_perp_max))


def scan_grid(k_max: float, n_scan: int) -> np.ndarray:
    """Hybrid grid: log-spaced up to ``k_max/100`` then linear, ascending."""
    n_log = n_scan // 8
    lo = np.geomspace(k_max * 1e-4, k_max / 100, n_log, endpoint=False)
    hi = np.linspace(k_max / 100, k_max, n_scan - n_log)
    return np.concatenate([lo, hi])


def _refine(fun, z, vals, i):
    lo = z[i - 1] if i > 0 else z[i] * 0.5
    hi = z[i + 1] if i < len(z) - 1 else z[i]
    res = optimize.minimize_scalar(lambda x: -fun(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10 * max(hi, 1.0)})
    if -res.fun > vals[i]:
        return float(res.x), float(-res.fun)
    return float(z[i]), float(vals[i])


def _size(z_star, val):
    return 2.0 * math.pi / z_star if val > 0 else 0.0


def lattice_wavenumbers(direction, L: float, k_max: float, n_max: int = 64) -> np.ndarray:
    """|k| of the periodic-box modes ``2 pi (a, b)/L`` exactly along ``direction``.

    Returns an empty array when no integer vector with entries up to
    ``n_max`` is parallel to ``direction``.
    """
    dx, dy = direction
    best = None
    for a in range(-n_max, n_max + 1):
        for b in range(0, n_max + 1):
            if a == 0 and b == 0 or math.gcd(abs(a), b) != 1:
                continue
            n = math.hypot(a, b)
            if abs(a * dy - b * dx) <= 1e-9 * n:
                best = n if best is None else min(best, n)
    if best is None:
        return np.empty(0)
    step = 2.0 * math.pi * best / L
    return step * np.arange(1, int(k_max // step) + 1)


def predicted_pattern(params: ModelParams, base: BaseState = BaseState(),
                      k_max: float | None = None, n_scan: int = 4096,
                      lattice_length: float | None = None) -> PatternPrediction:
    """Most unstable wavenumbers along ``Omega0`` and ``Omega0_perp``.

    By default ``Re alpha`` is scanned densely on ``(0, k_max]`` and the
    maxima refined by bounded scalar search; a direction whose maximum is
    ``<= 0`` gets size 0. With ``lattice_length`` only wave vectors that fit
    the periodic box of that side are considered (no refinement).
    """
    if n_scan < 512:
        raise ValueError("n_scan must be >= 512")
    if k_max is None:
        k_max = 60.0 / params.tau
    c = _coeffs(params)
    rho0 = base.rho0

    def par(z):
        return growth_parallel(z, params, rho0, c)

    def perp(z):
        return growth_perpendicular(z, params, rho0, c)

    out = []
    for fun, direction in ((par, base.Omega0), (perp, base.perp)):
        if lattice_length is None:
            z = scan_grid(k_max, n_scan)
        else:
            z = lattice_wavenumbers(direction, lattice_length, k_max)
            if z.size == 0:
                out.append((0.0, -math.inf))
                continue
        vals = np.asarray(fun(z))
        i = int(np.argmax(vals))  # first maximum: ties go to the smaller |k|
        if lattice_length is None:
            zs, v = _refine(fun, z, vals, i)
        else:
            zs, v = float(z[i]), float(vals[i])
        out.append((zs, v))
    (kp, vp), (kq, vq) = out
    return PatternPrediction(_size(kp, vp), _size(kq, vq), vp, vq, kp, kq)


# --------------------------------------------------------------------------
# sweeps

STABILITY_COLUMNS = ["params_hash", "mu", "kappa", "zeta", "tau", "Cphi", "direction",
                     "b_p", "k_argmax", "max_re_alpha", "S_th"]


def stability_region(params_list, base: BaseState = BaseState(), k_max=None,
                     n_scan: int = 4096, lattice_length=None) -> list[dict]:
    """One row per (params, direction) with ``b_p``, argmax ``k``, max ``Re alpha`` and size."""
    rows = []
    for p in params_list:
        pred = predicted_pattern(p, base, k_max, n_scan, lattice_length)
        bp = bifurcation_parameter(p)
        for direction, k, a, S in (("parallel", pred.k_par, pred.alpha_par_max, pred.S1th),
                                   ("perpendicular", pred.k_perp, pred.alpha_perp_max, pred.S2th)):
            rows.append({"params_hash": p.hash(), "mu": p.mu, "kappa": p.kappa, "zeta": p.zeta,
                         "tau": p.tau, "Cphi": p.Cphi, "direction": direction, "b_p": bp,
                         "k_argmax": k, "max_re_alpha": a, "S_th": S})
    return rows


def write_stability_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STABILITY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
