"""Finite-volume solver for the continuum agent/obstacle model.

The constrained system for ``(rho, Omega)`` is approximated by a relaxation
model for the conservative variables ``Q = (rho, rho Omega_x, rho Omega_y)``
and solved by splitting: a conservative transport step followed by a
relaxation step projecting ``Omega`` back onto the unit circle.

Transport step, x direction (y is symmetric)::

    F(Q) = (d1 m, d2 m^2/rho + d3 rho, d2 m n/rho) + w Q - gamma_s (0, m_x, n_x)
    w    = -(rho_A/(zeta kappa)) d_x Lap(rho * phi * phi) - (mu/zeta) d_x rho

The interface flux is the centred average minus ``P2(A) dQ / 2`` where
``P2`` interpolates ``|lambda|`` at the three eigenvalues of the Jacobian
``A`` of the convective part (shifted by ``w``), so ``P2(A) = |A|``.
Order 1 uses cell values and forward Euler; order 2 (default) uses MUSCL
reconstruction and Heun's method. The nonlocal and diffusive terms use
compact interface differences in both cases.

Grid nodes sit at ``(i h, j h)`` with ``h = L/nx``; arrays are indexed
``[i, j]`` with ``i`` along x.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .alignment import AlignmentCoeffs, compute_alignment_coeffs
from .errors import CFLViolation, NegativeDensityError, NonFiniteError
from .params import ModelParams
from .potentials import phi
from .sampling import sample_points

ZERO_MOMENTUM = 1e-14
SPEED_FLOOR = 1e-8


# --------------------------------------------------------------------------
# state

@dataclass
class MacroField:
    t: float
    rho: np.ndarray  # (nx, nx)
    Omega: np.ndarray  # (nx, nx, 2)
    L: float = 1.0

    @property
    def nx(self) -> int:
        return self.rho.shape[0]

    @property
    def h(self) -> float:
        return self.L / self.nx

    @property
    def Q(self) -> np.ndarray:
        return np.stack((self.rho, self.rho * self.Omega[..., 0], self.rho * self.Omega[..., 1]))

    @classmethod
    def from_Q(cls, t: float, Q: np.ndarray, L: float = 1.0) -> "MacroField":
        rho = Q[0].copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            Om = np.stack((Q[1] / rho, Q[2] / rho), axis=-1)
        return cls(t, rho, Om, L)

    def mass(self) -> float:
        return float(self.rho.sum() * self.h ** 2)

    def copy(self) -> "MacroField":
        return MacroField(self.t, self.rho.copy(), self.Omega.copy(), self.L)


@dataclass
class ObstacleFieldDiag:
    rho_f: np.ndarray
    order: int

    @property
    def min(self) -> float:
        return float(self.rho_f.min())

    @property
    def negative(self) -> bool:
        return self.min < 0.0


@dataclass(frozen=True)
class SolverConfig:
    """Numerical options of :class:`MacroSolver`.

    ``dt`` fixes the step (a violation of the stability bounds raises
    :class:`CFLViolation`); otherwise the step is chosen each iteration from
    ``cfl`` and the diffusive and nonlocal bounds.
    """

    order: int = 2
    limiter: str = "mc"  # "mc" or "none" (centred slopes)
    dissipation: str = "polynomial"  # or "rusanov"
    cfl: float = 0.4
    dt: float | None = None
    relaxation: str = "exact"  # or "ode"
    relax_eps: float = 1e-3
    blowup_factor: float = 50.0
    stop_on_negative_rho_f: bool = True
    snapshot_dt: float | None = None
    max_steps: int = 10_000_000
    backend: str = "numba"  # or "numpy" (reference implementation)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.limiter not in ("mc", "none"):
            raise ValueError(f"unknown limiter {self.limiter!r}")
        if self.dissipation not in ("polynomial", "rusanov"):
            raise ValueError(f"unknown dissipation {self.dissipation!r}")
        if self.relaxation not in ("exact", "ode"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")
        if self.backend not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0 < self.cfl <= 0.5:
            raise ValueError("cfl must lie in (0, 0.5]")


# --------------------------------------------------------------------------
# convolution

@functools.lru_cache(maxsize=32)
def _kernel_hat(nx: int, L: float, tau: float, Cphi: float) -> np.ndarray:
    h = L / nx
    d = np.minimum(np.arange(nx), nx - np.arange(nx)) * h
    r = np.hypot(d[:, None], d[None, :])
    K = phi(r, tau, Cphi) * h * h
    out = np.fft.rfft2(K)
    out.setflags(write=False)
    return out


def kernel_hat(nx: int, params: ModelParams) -> np.ndarray:
    """Real FFT of the grid-sampled kernel times the cell area."""
    return _kernel_hat(int(nx), float(params.L), float(params.tau), float(params.Cphi))


def convolve_phi(field: np.ndarray, params: ModelParams) -> np.ndarray:
    """Periodic convolution ``field * phi`` on the node grid."""
    n = field.shape[0]
    return np.fft.irfft2(np.fft.rfft2(field) * kernel_hat(n, params), s=field.shape)


def convolve_phi_twice(field: np.ndarray, params: ModelParams) -> np.ndarray:
    n = field.shape[0]
    K = kernel_hat(n, params)
    return np.fft.irfft2(np.fft.rfft2(field) * K * K, s=field.shape)


def laplacian(f: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1)
            - 4.0 * f) / (h * h)


def hessian_det(f: np.ndarray, h: float) -> np.ndarray:
    fxx = (np.roll(f, -1, 0) - 2.0 * f + np.roll(f, 1, 0)) / (h * h)
    fyy = (np.roll(f, -1, 1) - 2.0 * f + np.roll(f, 1, 1)) / (h * h)
    fxy = (np.roll(np.roll(f, -1, 0), -1, 1) - np.roll(np.roll(f, -1, 0), 1, 1)
           - np.roll(np.roll(f, 1, 0), -1, 1) + np.roll(np.roll(f, 1, 0), 1, 1)) / (4.0 * h * h)
    return fxx * fyy - fxy * fxy


def compute_rho_f(rho: np.ndarray, params: ModelParams, d_rho_bar_dt: np.ndarray | None = None,
                  order: int = 1, L: float | None = None,
                  raise_on_negative: bool = True) -> ObstacleFieldDiag:
    """Obstacle density ``rho_A (1 + Lap(rho_bar)/kappa [+ second-order terms])``.

    ``rho_bar = rho * phi``. With ``order=2`` the terms
    ``det Hess(rho_bar)/kappa^2 - (eta/kappa^2) Lap(d_t rho_bar)`` are added,
    where ``d_rho_bar_dt`` is ``d_t rho_bar`` (zero when omitted).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    L = params.L if L is None else L
    h = L / rho.shape[0]
    rb = convolve_phi(rho, params)
    val = 1.0 + laplacian(rb, h) / params.kappa
    if order == 2:
        val = val + hessian_det(rb, h) / params.kappa ** 2
        if d_rho_bar_dt is not None:
            val = val - params.eta / params.kappa ** 2 * laplacian(d_rho_bar_dt, h)
    diag = ObstacleFieldDiag(params.rhoA * val, order)
    if not np.all(np.isfinite(diag.rho_f)):
        raise NonFiniteError("obstacle density is not finite")
    if raise_on_negative and diag.negative:
        raise NegativeDensityError(f"obstacle density negative (min {diag.min:.4g})", diag)
    return diag



# --------------------------------------------------------------------------
# compiled face fluxes (same arithmetic as MacroSolver.interface_flux)

@njit(cache=True, inline="always")
def _mc_slope(a, b, limited):
    c = 0.5 * (a + b)
    if not limited:
        return c
    if a * b <= 0.0:
        return 0.0
    m = min(2.0 * abs(a), 2.0 * abs(b), abs(c))
    return m if c > 0 else -m


@njit(cache=True)
def _face_fluxes(Q, pot, axis, h, zeta, d1, d2, d3, gs, order, limited, rusanov, floor):
    n = Q.shape[1]
    F = np.empty((3, n, n))
    ni = 1 + axis
    ti = 2 - axis
    qm = np.empty(3)
    q0 = np.empty(3)
    q1 = np.empty(3)
    q2 = np.empty(3)
    qL = np.empty(3)
    qR = np.empty(3)
    dq = np.empty(3)
    r1 = np.empty(3)
    r2 = np.empty(3)
    fl = np.empty(3)
    for i in range(n):
        for j in range(n):
            if axis == 0:
                im, jm = (i - 1) % n, j
                ip, jp = (i + 1) % n, j
                ipp, jpp = (i + 2) % n, j
            else:
                im, jm = i, (j - 1) % n
                ip, jp = i, (j + 1) % n
                ipp, jpp = i, (j + 2) % n
            for c in range(3):
                qm[c] = Q[c, im, jm]
                q0[c] = Q[c, i, j]
                q1[c] = Q[c, ip, jp]
                q2[c] = Q[c, ipp, jpp]
            w = -(pot[ip, jp] - pot[i, j]) / (zeta * h)
            for c in range(3):
                qL[c] = q0[c]
                qR[c] = q1[c]
            if order == 2:
                for c in range(3):
                    qL[c] = q0[c] + 0.5 * _mc_slope(q0[c] - qm[c], q1[c] - q0[c], limited)
                    qR[c] = q1[c] - 0.5 * _mc_slope(q1[c] - q0[c], q2[c] - q1[c], limited)
                if qL[0] <= 0.0 or qR[0] <= 0.0:
                    for c in range(3):
                        qL[c] = q0[c]
                        qR[c] = q1[c]
            # centred convective flux plus nonlocal transport
            for side in range(2):
                q = qL if side == 0 else qR
                fl_r = d1 * q[ni]
                fl_n = d2 * q[ni] * q[ni] / q[0] + d3 * q[0]
                fl_t = d2 * q[ni] * q[ti] / q[0]
                if side == 0:
                    fl[0] = 0.5 * fl_r
                    fl[1] = 0.5 * fl_n
                    fl[2] = 0.5 * fl_t
                else:
                    fl[0] += 0.5 * fl_r
                    fl[1] += 0.5 * fl_n
                    fl[2] += 0.5 * fl_t
            rho = 0.5 * (qL[0] + qR[0])
            mn = 0.5 * (qL[ni] + qR[ni])
            mt = 0.5 * (qL[ti] + qR[ti])
            F[0, i, j] = fl[0] + w * rho
            F[ni, i, j] = fl[1] + w * mn
            F[ti, i, j] = fl[2] + w * mt
            u = mn / rho
            v = mt / rho
            disc = d2 * (d2 - d1) * u * u + d1 * d3
            sp = max(math.sqrt(abs(disc)), floor)
            cen = w + d2 * u
            l1 = cen - sp
            l2 = cen
            l3 = cen + sp
            for c in range(3):
                dq[c] = qR[c] - qL[c]
            if rusanov:
                a = max(abs(l1), abs(l3))
                for c in range(3):
                    F[c, i, j] -= 0.5 * a * dq[c]
            else:
                f12 = (abs(l2) - abs(l1)) / sp
                f23 = (abs(l3) - abs(l2)) / sp
                f123 = (f23 - f12) / (2.0 * sp)
                # r1 = (A - l1) dq, r2 = (A - l2) r1 in (rho, normal, tangential) order
                r1[0] = d1 * dq[ni] + w * dq[0] - l1 * dq[0]
                r1[1] = (d3 - d2 * u * u) * dq[0] + (2.0 * d2 * u + w) * dq[ni] - l1 * dq[ni]
                r1[2] = -d2 * u * v * dq[0] + d2 * v * dq[ni] + (d2 * u + w) * dq[ti] - l1 * dq[ti]
                r2[0] = d1 * r1[1] + w * r1[0] - l2 * r1[0]
                r2[1] = (d3 - d2 * u * u) * r1[0] + (2.0 * d2 * u + w) * r1[1] - l2 * r1[1]
                r2[2] = -d2 * u * v * r1[0] + d2 * v * r1[1] + (d2 * u + w) * r1[2] - l2 * r1[2]
                a1 = abs(l1)
                F[0, i, j] -= 0.5 * (a1 * dq[0] + f12 * r1[0] + f123 * r2[0])
                F[ni, i, j] -= 0.5 * (a1 * dq[ni] + f12 * r1[1] + f123 * r2[1])
                F[ti, i, j] -= 0.5 * (a1 * dq[ti] + f12 * r1[2] + f123 * r2[2])
            F[1, i, j] -= gs * (Q[1, ip, jp] - Q[1, i, j]) / h
            F[2, i, j] -= gs * (Q[2, ip, jp] - Q[2, i, j]) / h
    return F


# --------------------------------------------------------------------------
# solver

def _shift(a: np.ndarray, axis: int, k: int) -> np.ndarray:
    """``a`` at index ``i + k`` along spatial ``axis`` (periodic)."""
    return np.roll(a, -k, axis=axis + a.ndim - 2)


def _limited_slope(Q: np.ndarray, axis: int, limiter: str) -> np.ndarray:
    a = Q - _shift(Q, axis, -1)
    b = _shift(Q, axis, 1) - Q
    c = 0.5 * (a + b)
    if limiter == "none":
        return c
    # monotonized central
    s = np.sign(c)
    m = np.minimum(np.minimum(2.0 * np.abs(a), 2.0 * np.abs(b)), np.abs(c))
    return np.where(a * b > 0, s * m, 0.0)


@dataclass
class RunEvent:
    t: float
    kind: str
    detail: str = ""


@dataclass
class PDERun:
    snapshots: list[MacroField]
    stop_cause: str
    t_stop: float
    steps: int
    events: list[RunEvent] = field(default_factory=list)
    mass_drift: float = 0.0
    norm_error: float = 0.0
    max_ratio: float = 0.0  # largest max(rho)/mean(rho) seen

    @property
    def final(self) -> MacroField:
        return self.snapshots[-1]


STOP_CAUSES = ("t_end", "blowup", "negative_obstacle_density", "negative_agent_density",
               "nonfinite", "max_steps")


class MacroSolver:
    """Splitting solver on an ``nx``-by-``nx`` periodic grid."""

    def __init__(self, params: ModelParams, nx: int, config: SolverConfig = SolverConfig(),
                 coeffs: AlignmentCoeffs | None = None):
        if nx < 4:
            raise ValueError("nx must be >= 4")
        self.params = params
        self.nx = int(nx)
        self.L = params.L
        self.h = params.L / nx
        self.config = config
        self.coeffs = coeffs or compute_alignment_coeffs(params.ds_over_nu, params.rA, params.u0)
        self.events: list[RunEvent] = []
        self._t = 0.0
        K = kernel_hat(self.nx, params)
        kx = np.fft.fftfreq(self.nx) * 2 * math.pi
        ky = np.fft.rfftfreq(self.nx) * 2 * math.pi
        lap = -(4.0 / self.h ** 2) * (np.sin(kx[:, None] / 2) ** 2 + np.sin(ky[None, :] / 2) ** 2)
        # largest anti-diffusive rate per unit density from the obstacle term
        self._nonlocal_rate = float(np.max(lap * lap * np.abs(K) ** 2)) * params.rhoA \
            / (params.zeta * params.kappa)

    # ---- pieces of the transport step

    def potential(self, rho: np.ndarray) -> np.ndarray:
        """``(rho_A/kappa) Lap(rho * phi * phi) + mu rho``; its gradient over zeta is ``-w``."""
        p = self.params
        qt = convolve_phi_twice(rho, p)
        return p.rhoA / p.kappa * laplacian(qt, self.h) + p.mu * rho

    def eigen_speeds(self, Q: np.ndarray, axis: int, w=0.0):
        """Centre ``c`` and half-width ``s`` of the eigenvalues ``c - s, c, c + s``."""
        c = self.coeffs
        u = Q[1 + axis] / Q[0]
        disc = c.d2 * (c.d2 - c.d1) * u * u + c.d1 * c.d3
        s = np.maximum(np.sqrt(np.abs(disc)), SPEED_FLOOR)
        return w + c.d2 * u, s

    def _convective(self, Q, axis):
        c = self.coeffs
        rho, mn, mt = Q[0], Q[1 + axis], Q[2 - axis]
        f = np.empty_like(Q)
        f[0] = c.d1 * mn
        f[1 + axis] = c.d2 * mn * mn / rho + c.d3 * rho
        f[2 - axis] = c.d2 * mn * mt / rho
        return f

    def _jac_apply(self, rho, u, v, w, vec, axis):
        # Jacobian of the convective flux plus w I, at (rho, u, v) in normal/tangential form
        c = self.coeffs
        vr, vn, vt = vec[0], vec[1 + axis], vec[2 - axis]
        out = np.empty_like(vec)
        out[0] = c.d1 * vn + w * vr
        out[1 + axis] = (c.d3 - c.d2 * u * u) * vr + (2.0 * c.d2 * u + w) * vn
        out[2 - axis] = -c.d2 * u * v * vr + c.d2 * v * vn + (c.d2 * u + w) * vt
        return out

    def dissipation(self, Qbar, w, dQ, axis):
        """``P2(A) dQ`` (or the Rusanov ``max|lambda| dQ``) at the mean state."""
        cen, s = self.eigen_speeds(Qbar, axis, w)
        l1, l2, l3 = cen - s, cen, cen + s
        if self.config.dissipation == "rusanov":
            return np.maximum(np.abs(l1), np.abs(l3)) * dQ
        rho = Qbar[0]
        u = Qbar[1 + axis] / rho
        v = Qbar[2 - axis] / rho
        f12 = (np.abs(l2) - np.abs(l1)) / s
        f23 = (np.abs(l3) - np.abs(l2)) / s
        f123 = (f23 - f12) / (2.0 * s)
        r1 = self._jac_apply(rho, u, v, w, dQ, axis) - l1 * dQ
        r2 = self._jac_apply(rho, u, v, w, r1, axis) - l2 * r1
        return np.abs(l1) * dQ + f12 * r1 + f123 * r2

    def interface_flux(self, Q: np.ndarray, pot: np.ndarray, axis: int) -> np.ndarray:
        """Numerical flux through the faces ``i + 1/2`` along ``axis``."""
        p = self.params
        if self.config.backend == "numba":
            c = self.coeffs
            return _face_fluxes(np.ascontiguousarray(Q), np.ascontiguousarray(pot), axis, self.h,
                                p.zeta, c.d1, c.d2, c.d3, c.gamma_s, self.config.order,
                                self.config.limiter == "mc", self.config.dissipation == "rusanov",
                                SPEED_FLOOR)
        h = self.h
        w = -(_shift(pot, axis, 1) - pot) / (p.zeta * h)
        QR_cell = _shift(Q, axis, 1)
        if self.config.order == 2:
            sl = _limited_slope(Q, axis, self.config.limiter)
            QL = Q + 0.5 * sl
            QR = QR_cell - 0.5 * _shift(sl, axis, 1)
            bad = (QL[0] <= 0) | (QR[0] <= 0)
            if np.any(bad):
                QL = np.where(bad, Q, QL)
                QR = np.where(bad, QR_cell, QR)
        else:
            QL, QR = Q, QR_cell
        Qbar = 0.5 * (QL + QR)
        dQ = QR - QL
        flux = 0.5 * (self._convective(QL, axis) + self._convective(QR, axis)) + w * Qbar
        flux -= 0.5 * self.dissipation(Qbar, w, dQ, axis)
        flux[1:] -= self.coeffs.gamma_s * (QR_cell[1:] - Q[1:]) / h
        return flux

    def rhs(self, Q: np.ndarray) -> np.ndarray:
        pot = self.potential(Q[0])
        out = np.zeros_like(Q)
        for axis in (0, 1):
            F = self.interface_flux(Q, pot, axis)
            out -= (F - _shift(F, axis, -1)) / self.h
        return out

    def stable_dt(self, Q: np.ndarray) -> float:
        p = self.params
        hyp = 0.0
        for axis in (0, 1):
            cen, s = self.eigen_speeds(Q, axis)
            hyp += float(np.max(np.abs(cen) + s))
        # the nonlocal advection speed enters through w; bound it from the potential
        pot = self.potential(Q[0])
        wmax = max(float(np.max(np.abs(_shift(pot, a, 1) - pot))) for a in (0, 1)) / (p.zeta * self.h)
        hyp += 2.0 * wmax
        # momentum feels viscosity and the repulsion-driven spreading at once,
        # and both add to the upwind dissipation: combine the rates
        D = self.coeffs.gamma_s + p.mu * float(np.max(Q[0])) / p.zeta
        rate = hyp / (self.config.cfl * self.h) + D / (0.9 * 0.25 * self.h ** 2)
        dt = 1.0 / rate
        growth = self._nonlocal_rate * float(np.max(Q[0]))
        if growth > 0:
            dt = min(dt, 0.1 / growth)
        return dt

    def flux_step(self, Q: np.ndarray, dt: float) -> np.ndarray:
        """Advance the conservative part by ``dt`` (Euler for order 1, Heun for order 2)."""
        if self.config.order == 1:
            out = Q + dt * self.rhs(Q)
        else:
            Q1 = Q + dt * self.rhs(Q)
            if np.any(Q1[0] <= 0) or not np.all(np.isfinite(Q1)):
                out = Q1
            else:
                out = 0.5 * (Q + Q1 + dt * self.rhs(Q1))
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("transport step produced non-finite values", self._t + dt)
        return out

    def relaxation_step(self, Q: np.ndarray, dt: float | None = None,
                        previous: np.ndarray | None = None) -> np.ndarray:
        """Project ``Omega`` back to unit length, keeping ``rho`` and the direction.

        Where ``|rho Omega| < 1e-14`` the direction is undefined; the previous
        direction (from ``previous`` or ``(1, 0)``) is used and the event logged.
        """
        out = Q.copy()
        mnorm = np.hypot(Q[1], Q[2])
        zero = mnorm < ZERO_MOMENTUM
        safe = np.where(zero, 1.0, mnorm)
        if self.config.relaxation == "exact" or dt is None:
            scale = np.where(zero, 0.0, Q[0] / safe)
        else:
            r0 = safe / Q[0]
            e = math.exp(-2.0 * dt / self.config.relax_eps)
            r = 1.0 / np.sqrt(1.0 + (1.0 / (r0 * r0) - 1.0) * e)
            scale = np.where(zero, 0.0, r / r0)
        out[1] = Q[1] * scale
        out[2] = Q[2] * scale
        if np.any(zero):
            n_zero = int(zero.sum())
            if previous is not None:
                pn = np.hypot(previous[1], previous[2])
                px = np.where(pn > 0, previous[1] / np.where(pn > 0, pn, 1.0), 1.0)
                py = np.where(pn > 0, previous[2] / np.where(pn > 0, pn, 1.0), 0.0)
            else:
                px, py = np.ones_like(Q[0]), np.zeros_like(Q[0])
            out[1] = np.where(zero, Q[0] * px, out[1])
            out[2] = np.where(zero, Q[0] * py, out[2])
            self.events.append(RunEvent(self._t, "ZeroMomentum", f"{n_zero} node(s)"))
        return out

    def step(self, Q: np.ndarray, dt: float | None = None,
             limit: float | None = None) -> tuple[np.ndarray, float]:
        """One full splitting step; returns the new state and the step used."""
        if limit is None:
            limit = self.stable_dt(Q)
        if dt is None:
            dt = self.config.dt if self.config.dt is not None else limit
        if dt > limit * (1 + 1e-12):
            raise CFLViolation(f"dt={dt:.3g} exceeds the stability limit {limit:.3g}")
        Qs = self.flux_step(Q, dt)
        if np.any(Qs[0] <= 0):
            return Qs, dt
        Qn = self.relaxation_step(Qs, dt, previous=Q)
        self._t += dt
        return Qn, dt

    def obstacle_density(self, rho: np.ndarray, order: int = 1, d_rho_bar_dt=None) -> ObstacleFieldDiag:
        return compute_rho_f(rho, self.params, d_rho_bar_dt, order=order, L=self.L,
                             raise_on_negative=False)

    def run(self, initial: MacroField, t_end: float, callback=None) -> PDERun:
        """Alternate transport and relaxation until ``t_end`` or a stop condition."""
        if initial.nx != self.nx:
            raise ValueError("grid size of the initial field does not match the solver")
        cfg = self.config
        Q = initial.Q
        if np.any(Q[0] <= 0):
            raise ValueError("initial density must be positive")
        t = initial.t
        self._t = t
        mass0 = float(Q[0].sum())
        snaps = [MacroField.from_Q(t, Q, self.L)]
        next_snap = t + cfg.snapshot_dt if cfg.snapshot_dt else math.inf
        cause = "t_end"
        steps = 0
        drift = 0.0
        nerr = 0.0
        ratio = float(Q[0].max() / Q[0].mean())
        while t < t_end * (1 - 1e-14):
            if steps >= cfg.max_steps:
                cause = "max_steps"
                break
            limit = self.stable_dt(Q)
            dt = limit if cfg.dt is None else cfg.dt
            dt = min(dt, t_end - t)
            try:
                Qn, dt = self.step(Q, dt, limit)
            except NonFiniteError:
                cause = "nonfinite"
                break
            if np.any(Qn[0] <= 0):
                cause = "negative_agent_density"
                t += dt
                Q = Qn
                break
            Q = Qn
            t += dt
            steps += 1
            drift = max(drift, abs(float(Q[0].sum()) - mass0) / mass0)
            nerr = max(nerr, float(np.max(np.abs(np.hypot(Q[1], Q[2]) / Q[0] - 1.0))))
            mean = float(Q[0].mean())
            ratio = max(ratio, float(Q[0].max()) / mean)
            if callback is not None:
                callback(t, Q)
            if float(Q[0].max()) > cfg.blowup_factor * mean:
                cause = "blowup"
                break
            if cfg.stop_on_negative_rho_f and self.obstacle_density(Q[0]).negative:
                cause = "negative_obstacle_density"
                break
            if t >= next_snap - 1e-12:
                snaps.append(MacroField.from_Q(t, Q, self.L))
                next_snap += cfg.snapshot_dt
        if cause != "t_end" or snaps[-1].t != t:
            snaps.append(MacroField.from_Q(t, Q, self.L))
        if cause != "t_end":
            self.events.append(RunEvent(t, "stop", cause))
        return PDERun(snaps, cause, t, steps, list(self.events), drift, nerr, ratio)


def flux_step(Q: np.ndarray, params: ModelParams, dt: float,
              config: SolverConfig = SolverConfig()) -> np.ndarray:
    """One transport step on the grid implied by ``Q.shape``."""
    return MacroSolver(params, Q.shape[1], config).flux_step(Q, dt)


def relaxation_step(Q: np.ndarray) -> np.ndarray:
    """Exact relaxation: ``rho`` kept, ``Omega`` normalized at every node."""
    out = Q.copy()
    mnorm = np.hypot(Q[1], Q[2])
    ok = mnorm >= ZERO_MOMENTUM
    scale = np.where(ok, Q[0] / np.where(ok, mnorm, 1.0), 1.0)
    out[1] = Q[1] * scale
    out[2] = Q[2] * scale
    return out


def run_pde(initial: MacroField, params: ModelParams, t_end: float,
            config: SolverConfig = SolverConfig(), callback=None) -> PDERun:
    return MacroSolver(params, initial.nx, config).run(initial, t_end, callback)


# --------------------------------------------------------------------------
# initial data

def uniform_field(nx: int, params: ModelParams, angle: float = math.pi / 4) -> MacroField:
    L = params.L
    rho = np.full((nx, nx), 1.0 / (L * L))
    Om = np.empty((nx, nx, 2))
    Om[..., 0] = math.cos(angle)
    Om[..., 1] = math.sin(angle)
    return MacroField(0.0, rho, Om, L)


def _normalize_mass(f: MacroField) -> MacroField:
    f.rho *= 1.0 / (f.rho.sum() * f.h ** 2)
    return f


def init_perturbed(params: ModelParams, nx: int, amplitude: float, seed,
                   angle: float = math.pi / 4, max_mode: int = 8) -> MacroField:
    """Uniform density plus a band-limited random perturbation, total mass 1.

    The perturbation is a random combination of the Fourier modes with
    ``1 <= max(|a|, |b|) <= max_mode`` (zero mean), scaled to unit maximum
    absolute value before multiplying by ``amplitude``.
    """
    f = uniform_field(nx, params, angle)
    if amplitude == 0:
        return f
    rng = np.random.default_rng(seed)
    spec = np.zeros((nx, nx), complex)
    for a in range(-max_mode, max_mode + 1):
        for b in range(-max_mode, max_mode + 1):
            if a == 0 and b == 0:
                continue
            spec[a % nx, b % nx] = rng.normal() + 1j * rng.normal()
    # Hermitian part gives a real field
    spec = 0.5 * (spec + np.conj(np.roll(np.flip(spec, (0, 1)), 1, (0, 1))))
    pert = np.fft.ifft2(spec).real
    pert -= pert.mean()
    pert /= np.max(np.abs(pert))
    f.rho = f.rho + amplitude * pert
    if np.any(f.rho <= 0):
        raise ValueError("amplitude too large: density not positive")
    return _normalize_mass(f)


def init_plane_wave(params: ModelParams, nx: int, mode: tuple[int, int], amplitude: float,
                    angle: float = math.pi / 4) -> MacroField:
    """``rho = (1 + amplitude cos(2 pi (a x + b y)/L))/L^2`` with uniform ``Omega``."""
    f = uniform_field(nx, params, angle)
    x = np.arange(nx) * f.h
    a, b = mode
    ph = 2 * math.pi * (a * x[:, None] + b * x[None, :]) / params.L
    f.rho = f.rho * (1.0 + amplitude * np.cos(ph))
    return f


def mode_amplitude(rho: np.ndarray, mode: tuple[int, int]) -> float:
    """Modulus of the normalized Fourier coefficient of ``rho`` at integer ``mode``."""
    n = rho.shape[0]
    c = np.fft.fft2(rho)[mode[0] % n, mode[1] % n]
    return float(abs(c)) * 2.0 / rho.size


# --------------------------------------------------------------------------
# output

FIELD_ARRAYS = ("rho_g", "Omega_x", "Omega_y", "rho_f")


def write_field(f: MacroField, params: ModelParams, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (header) and ``<stem>.bin`` (little-endian f8 arrays)."""
    stem = Path(stem)
    rho_f = compute_rho_f(f.rho, params, L=f.L, raise_on_negative=False).rho_f
    header = {"nx": f.nx, "t": f.t, "L": f.L, "params_hash": params.hash(),
              "arrays": list(FIELD_ARRAYS), "dtype": "<f8", "order": "C"}
    hp = stem.with_suffix(".json")
    bp = stem.with_suffix(".bin")
    hp.write_text(json.dumps(header, indent=1) + "\n")
    data = np.stack((f.rho, f.Omega[..., 0], f.Omega[..., 1], rho_f)).astype("<f8")
    bp.write_bytes(np.ascontiguousarray(data).tobytes())
    return hp, bp


def read_field(stem: str | Path) -> tuple[MacroField, np.ndarray, dict]:
    """Inverse of :func:`write_field`; returns the field, ``rho_f`` and the header."""
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    n = int(header["nx"])
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrs = raw.reshape(len(header["arrays"]), n, n)
    f = MacroField(float(header["t"]), arrs[0].copy(), np.stack((arrs[1], arrs[2]), axis=-1),
                   float(header["L"]))
    return f, arrs[3].copy(), header


def write_field_csv(f: MacroField, params: ModelParams, path: str | Path) -> None:
    rho_f = compute_rho_f(f.rho, params, L=f.L, raise_on_negative=False).rho_f
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x", "y", *FIELD_ARRAYS])
        for i in range(f.nx):
            for j in range(f.nx):
                w.writerow([i, j, float(i * f.h), float(j * f.h), float(f.rho[i, j]),
                            float(f.Omega[i, j, 0]), float(f.Omega[i, j, 1]), float(rho_f[i, j])])


def write_point_cloud(f: MacroField, params: ModelParams, path: str | Path, N: int, seed) -> None:
    """Sample ``N`` agents from ``rho_g`` and ``N`` obstacles from ``rho_f``.

    Rows follow the particle snapshot format; agent headings are the angle
    of ``Omega`` at the owning node, obstacles use their own position as anchor.
    """
    rng = np.random.default_rng(seed)
    rho_f = compute_rho_f(f.rho, params, L=f.L, raise_on_negative=False).rho_f
    A = sample_points(f.rho, N, rng, f.L)
    O = sample_points(rho_f, N, rng, f.L)
    idx = np.mod(np.rint(A / f.h).astype(int), f.nx)
    theta = np.mod(np.arctan2(f.Omega[idx[:, 0], idx[:, 1], 1], f.Omega[idx[:, 0], idx[:, 1], 0]),
                   2 * math.pi)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "id", "x", "y", "theta_or_anchor_x", "anchor_y"])
        for k in range(N):
            w.writerow(["agent", k, float(A[k, 0]), float(A[k, 1]), float(theta[k]), ""])
        for i in range(N):
            w.writerow(["obstacle", i, float(O[i, 0]), float(O[i, 1]), float(O[i, 0]), float(O[i, 1])])
