"""Coefficients of the continuum orientation dynamics.

The constants ``c1, c2, c3`` depend only on the noise-to-alignment ratio
``ds/nu``. ``c1`` is the mean resultant of the circular exponential density
``m(theta) ~ exp((nu/ds) cos theta)``; ``c2`` needs the auxiliary function
``h = g / sin`` where ``g`` solves

    (nu/ds) sin(theta) g' + g'' = sin(theta),   g(0) = g(pi) = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg

from .errors import BVPError

QUAD_EPSABS = 1e-10


@dataclass(frozen=True)
class AlignmentCoeffs:
    c1: float
    c2: float
    c3: float
    d1: float
    d2: float
    d3: float
    gamma_s: float


def _c1(k: float) -> float:
    # exp(k(cos - 1)) keeps the weight bounded for large k.
    def w(t):
        return math.exp(k * (math.cos(t) - 1.0))

    z, _ = integrate.quad(w, 0.0, math.pi, epsabs=QUAD_EPSABS, limit=200)
    num, _ = integrate.quad(lambda t: math.cos(t) * w(t), 0.0, math.pi, epsabs=QUAD_EPSABS, limit=200)
    # Integrand is even about pi, so the [0, pi] halves cancel in the ratio.
    return num / z


def solve_g(k: float, n_nodes: int = 4001) -> tuple[np.ndarray, np.ndarray]:
    """Solve the two-point BVP for ``g`` with centred finite differences.

    Returns the node array ``theta`` on ``[0, pi]`` and ``g`` at the nodes.
    """
    if n_nodes < 5:
        raise BVPError("need at least 5 nodes")
    theta = np.linspace(0.0, math.pi, n_nodes)
    h = theta[1] - theta[0]
    s = np.sin(theta[1:-1])
    n = n_nodes - 2
    ab = np.zeros((3, n))
    ab[0, 1:] = 1.0 / h**2 + k * s[:-1] / (2.0 * h)
    ab[1, :] = -2.0 / h**2
    ab[2, :-1] = 1.0 / h**2 - k * s[1:] / (2.0 * h)
    try:
        inner = linalg.solve_banded((1, 1), ab, s)
    except (linalg.LinAlgError, ValueError) as exc:
        raise BVPError(f"BVP solve failed with {n_nodes} nodes: {exc}") from exc
    if not np.all(np.isfinite(inner)):
        raise BVPError(f"BVP solution not finite with {n_nodes} nodes; refine the grid")
    g = np.zeros(n_nodes)
    g[1:-1] = inner
    return theta, g


def compute_c2(k: float, n_nodes: int = 4001) -> float:
    theta, g = solve_g(k, n_nodes)
    hfun = np.empty_like(g)
    hfun[1:-1] = g[1:-1] / np.sin(theta[1:-1])
    # limits g'(0) and -g'(pi); only multiply sin^2 = 0 in the quadratures below
    dt = theta[1] - theta[0]
    hfun[0] = (g[1] - g[0]) / dt
    hfun[-1] = -(g[-1] - g[-2]) / dt
    m = np.exp(k * (np.cos(theta) - 1.0))
    s2 = np.sin(theta) ** 2
    num = integrate.simpson(s2 * np.cos(theta) * m * hfun, x=theta)
    den = integrate.simpson(s2 * m * hfun, x=theta)
    if den == 0.0 or not math.isfinite(num / den):
        raise BVPError("degenerate c2 quotient")
    return float(num / den)


def compute_alignment_coeffs(ds_over_nu: float, rA: float, u0: float,
                             n_nodes: int = 4001) -> AlignmentCoeffs:
    if ds_over_nu <= 0:
        raise ValueError("ds_over_nu must be > 0")
    k = 1.0 / ds_over_nu
    c1 = _c1(k)
    c2 = compute_c2(k, n_nodes)
    c3 = ds_over_nu
    gamma_s = rA * rA / 8.0 * (ds_over_nu + c2)
    return AlignmentCoeffs(c1=c1, c2=c2, c3=c3, d1=u0 * c1, d2=u0 * c2, d3=u0 * c3,
                           gamma_s=gamma_s)
