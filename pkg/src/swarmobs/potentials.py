"""Compactly supported repulsion potentials and their radial Fourier transform."""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import integrate, optimize, special

QUAD_EPSABS = 1e-10


def psi(r, mu: float, rR: float):
    """Agent-agent repulsion potential; integrates to ``mu`` over the plane."""
    r = np.asarray(r, dtype=float)
    t = np.clip(1.0 - r / rR, 0.0, None)
    return 6.0 * mu / (math.pi * rR * rR) * t * t


def phi(r, tau: float, Cphi: float):
    """Agent-obstacle repulsion potential; ``|grad phi|`` integrates to ``Cphi``."""
    r = np.asarray(r, dtype=float)
    t = np.clip(1.0 - r / tau, 0.0, None)
    return 3.0 * Cphi / (2.0 * math.pi * tau) * t * t


def _radial_grad(x, radius: float, coef: float):
    # coef * (1 - r/radius) / r * x for 0 < r < radius, zero elsewhere.
    x = np.asarray(x, dtype=float)
    dx = x[..., 0]
    dy = x[..., 1]
    r = np.sqrt(dx * dx + dy * dy)
    inside = (r > 0.0) & (r < radius)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(inside, coef * (1.0 - r / radius) / r, 0.0)
    return np.stack([s * dx, s * dy], axis=-1)


def grad_phi(x, tau: float, Cphi: float):
    """Gradient of ``phi`` at displacement(s) ``x`` of shape ``(..., 2)``."""
    return _radial_grad(x, tau, grad_phi_coef(tau, Cphi))


def grad_psi(x, mu: float, rR: float):
    return _radial_grad(x, rR, grad_psi_coef(mu, rR))


def grad_phi_coef(tau: float, Cphi: float) -> float:
    return -3.0 * Cphi / (math.pi * tau * tau)


def grad_psi_coef(mu: float, rR: float) -> float:
    return -12.0 * mu / (math.pi * rR * rR * rR)


def _hankel(z: float, tau: float, Cphi: float) -> float:
    amp = 3.0 * Cphi / (2.0 * math.pi * tau)

    def integrand(r):
        t = 1.0 - r / tau
        return amp * t * t * special.j0(z * r) * r

    val, _ = integrate.quad(integrand, 0.0, tau, epsabs=QUAD_EPSABS, epsrel=1e-12, limit=200)
    return 2.0 * math.pi * val


def phi_hat(z, tau: float, Cphi: float):
    """Two-dimensional Fourier transform of ``phi`` at radial wavenumber(s) ``z``.

    Evaluated as the Hankel transform ``2 pi int_0^tau phi(r) J0(z r) r dr``
    by adaptive quadrature, so it is real and even in ``z``.
    """
    if np.ndim(z) == 0:
        return _hankel(abs(float(z)), tau, Cphi)
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape)
    for idx, zi in np.ndenumerate(z):
        out[idx] = _hankel(abs(float(zi)), tau, Cphi)
    return out


@functools.lru_cache(maxsize=256)
def compute_c0(tau: float, Cphi: float, n_scan: int = 400) -> tuple[float, float]:
    """Maximum of ``z**2 * phi_hat(z)**2`` over ``z > 0`` and its location.

    Dense scan over ``(0, 40/tau]`` followed by golden-section refinement
    around the best scan point.
    """
    z_max = 40.0 / tau
    zs = np.linspace(z_max / n_scan, z_max, n_scan)

    def objective(z):
        return z * z * phi_hat(z, tau, Cphi) ** 2

    vals = np.array([objective(z) for z in zs])
    i = int(np.argmax(vals))
    if Cphi == 0.0:
        return 0.0, float(zs[i])
    if 0 < i < n_scan - 1:
        res = optimize.minimize_scalar(
            lambda z: -objective(z), bracket=(zs[i - 1], zs[i], zs[i + 1]),
            method="golden", tol=1e-10,
        )
    else:
        lo = zs[i - 1] if i > 0 else 0.0
        hi = zs[i + 1] if i < n_scan - 1 else z_max
        res = optimize.minimize_scalar(
            lambda z: -objective(z), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-10 * z_max},
        )
    z_star = float(res.x)
    c0 = float(objective(z_star))
    if c0 < vals[i]:
        z_star, c0 = float(zs[i]), float(vals[i])
    return c0, z_star
