"""Individual-based simulator for self-propelled agents among tethered obstacles.

Obstacles ``X_i`` are pulled towards fixed anchors ``Y_i`` by springs and
pushed by agents through ``phi``; agents ``Z_k`` move at speed ``u0`` along
their heading ``theta_k``, feel ``phi`` from the obstacles and ``psi`` from
each other, and align with the mean heading of neighbours within ``rA``.

Time stepping is Euler-Maruyama. Headings are integrated as angles, which
keeps the unit-norm constraint exact. Neighbour sums use uniform cell lists
whose per-particle accumulation runs in increasing neighbour index, so the
result is bitwise identical to an all-pairs loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit

from .errors import NonFiniteError
from .params import ModelParams
from .potentials import grad_phi_coef, grad_psi_coef

TWO_PI = 2.0 * math.pi
J_EPS = 1e-12


@dataclass
class ParticleState:
    t: float
    X: np.ndarray  # (N, 2) obstacle positions
    Y: np.ndarray  # (N, 2) anchors, never modified
    Z: np.ndarray  # (M, 2) agent positions
    theta: np.ndarray  # (M,) headings in [0, 2 pi)

    @property
    def alpha(self) -> np.ndarray:
        return np.column_stack((np.cos(self.theta), np.sin(self.theta)))

    def copy(self) -> "ParticleState":
        return ParticleState(self.t, self.X.copy(), self.Y, self.Z.copy(), self.theta.copy())


@dataclass(frozen=True)
class RunConfig:
    dt: float = 1e-3
    t_end: float = 10.0
    seed: int = 0
    snapshot_every: int = 1000  # steps

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.t_end < self.dt:
            raise ValueError("t_end must be >= dt")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def init_uniform(params: ModelParams, seed: int, heading: float = math.pi / 4) -> ParticleState:
    """Obstacles, anchors and agents i.i.d. uniform; all headings equal."""
    rng = np.random.default_rng(seed)
    L = params.L
    Y = rng.uniform(0.0, L, size=(params.N, 2))
    X = rng.uniform(0.0, L, size=(params.N, 2))
    Z = rng.uniform(0.0, L, size=(params.M, 2))
    theta = np.full(params.M, heading % TWO_PI)
    return ParticleState(0.0, X, Y, Z, theta)


def minimum_image(d: np.ndarray, L: float) -> np.ndarray:
    return d - L * np.floor(d / L + 0.5)


def order_parameter(state: ParticleState) -> float:
    """Polarization ``|mean(alpha_k)|``."""
    if state.theta.size == 0:
        raise ValueError("order parameter needs at least one agent")
    return float(np.hypot(np.cos(state.theta).mean(), np.sin(state.theta).mean()))


def mean_direction(k: int, state: ParticleState, rA: float, L: float = 1.0):
    """Normalized flux of headings within ``rA`` of agent ``k`` (self included).

    Returns ``None`` when the flux vanishes (below 1e-12).
    """
    d = minimum_image(state.Z - state.Z[k], L)
    near = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) <= rA
    J = np.array([np.cos(state.theta[near]).sum(), np.sin(state.theta[near]).sum()])
    n = math.hypot(J[0], J[1])
    if n < J_EPS:
        return None
    return J / n


# --------------------------------------------------------------------------
# cell lists

def cell_count(L: float, cutoff: float) -> int:
    return max(1, int(math.floor(L / cutoff)))


@njit(cache=True)
def _build_cells(pos, L, nc):
    n = pos.shape[0]
    cell = np.empty(n, np.int64)
    start = np.zeros(nc * nc + 1, np.int64)
    for i in range(n):
        cx = int(pos[i, 0] / L * nc)
        cy = int(pos[i, 1] / L * nc)
        cx = min(max(cx, 0), nc - 1)
        cy = min(max(cy, 0), nc - 1)
        c = cx * nc + cy
        cell[i] = c
        start[c + 1] += 1
    for c in range(nc * nc):
        start[c + 1] += start[c]
    fill = start[:-1].copy()
    order = np.empty(n, np.int64)
    for i in range(n):
        c = cell[i]
        order[fill[c]] = i
        fill[c] += 1
    return start, order


@njit(cache=True, inline="always")
def _wrap(d, L):
    # minimum image for |d| < L; same value as d - L*floor(d/L + 0.5)
    # except exactly at |d| = L/2, which lies outside every cutoff
    if d > 0.5 * L:
        return d - L
    if d < -0.5 * L:
        return d + L
    return d


@njit(cache=True)
def _gather(px, py, src, start, order, L, nc, rcut, buf, tmp):
    """Indices of sources within ``rcut`` of ``(px, py)``, sorted ascending.

    Each cell lists its members in ascending index, so the filtered
    per-cell runs are merged instead of sorted.
    """
    cx = min(max(int(px / L * nc), 0), nc - 1)
    cy = min(max(int(py / L * nc), 0), nc - 1)
    # with fewer than 3 cells per side the 3x3 stencil would revisit cells
    n_runs = 9 if nc >= 3 else nc * nc
    r2 = rcut * rcut
    heads = np.empty(10, np.int64)
    cnt = 0
    for q in range(n_runs):
        heads[q] = cnt
        if nc >= 3:
            c = ((cx + q // 3 - 1) % nc) * nc + (cy + q % 3 - 1) % nc
        else:
            c = q
        for p in range(start[c], start[c + 1]):
            j = order[p]
            dx = _wrap(px - src[j, 0], L)
            dy = _wrap(py - src[j, 1], L)
            if dx * dx + dy * dy <= r2:
                tmp[cnt] = j
                cnt += 1
    heads[n_runs] = cnt
    ends = heads[1:n_runs + 1].copy()
    for out in range(cnt):
        best = -1
        bv = 0
        for q in range(n_runs):
            if heads[q] < ends[q]:
                v = tmp[heads[q]]
                if best < 0 or v < bv:
                    best = q
                    bv = v
        buf[out] = bv
        heads[best] += 1
    return cnt


@njit(cache=True)
def _radial(dx, dy, radius, coef):
    r = math.sqrt(dx * dx + dy * dy)
    if r > 0.0 and r < radius:
        s = coef * (1.0 - r / radius) / r
        return s * dx, s * dy
    return 0.0, 0.0


@njit(cache=True)
def _pair_sums(X, Z, theta, L, nc_agent, nc_obs, rA, rR, tau, cphi, cpsi):
    N = X.shape[0]
    M = Z.shape[0]
    J = np.zeros((M, 2))
    rep = np.zeros((M, 2))
    obs_on_agent = np.zeros((M, 2))
    agent_on_obs = np.zeros((N, 2))
    if M == 0:
        return J, rep, obs_on_agent, agent_on_obs
    rmax = max(rA, rR)
    ca = np.cos(theta)
    sa = np.sin(theta)
    start, order = _build_cells(Z, L, nc_agent)
    buf = np.empty(M, np.int64)
    tmp = np.empty(M, np.int64)
    for k in range(M):
        cnt = _gather(Z[k, 0], Z[k, 1], Z, start, order, L, nc_agent, rmax, buf, tmp)
        jx = 0.0
        jy = 0.0
        fx = 0.0
        fy = 0.0
        for q in range(cnt):
            l = buf[q]
            dx = _wrap(Z[k, 0] - Z[l, 0], L)
            dy = _wrap(Z[k, 1] - Z[l, 1], L)
            if math.sqrt(dx * dx + dy * dy) <= rA:
                jx += ca[l]
                jy += sa[l]
            if l != k:
                gx, gy = _radial(dx, dy, rR, cpsi)
                fx += gx
                fy += gy
        J[k, 0] = jx
        J[k, 1] = jy
        rep[k, 0] = fx
        rep[k, 1] = fy
    if N == 0:
        return J, rep, obs_on_agent, agent_on_obs
    start, order = _build_cells(X, L, nc_obs)
    buf = np.empty(N, np.int64)
    tmp = np.empty(N, np.int64)
    # grad phi is odd, so each pair is evaluated once; looping k upwards keeps
    # the per-obstacle accumulation in ascending agent order as well
    for k in range(M):
        cnt = _gather(Z[k, 0], Z[k, 1], X, start, order, L, nc_obs, tau, buf, tmp)
        fx = 0.0
        fy = 0.0
        for q in range(cnt):
            i = buf[q]
            dx = _wrap(Z[k, 0] - X[i, 0], L)
            dy = _wrap(Z[k, 1] - X[i, 1], L)
            gx, gy = _radial(dx, dy, tau, cphi)
            fx += gx
            fy += gy
            agent_on_obs[i, 0] += -gx
            agent_on_obs[i, 1] += -gy
        obs_on_agent[k, 0] = fx
        obs_on_agent[k, 1] = fy
    return J, rep, obs_on_agent, agent_on_obs


@dataclass
class PairSums:
    """Raw neighbour sums entering one Euler-Maruyama step.

    ``J``: heading flux per agent (self included); ``rep``: sum of
    ``grad psi(Z_k - Z_l)`` over ``l != k``; ``obs_on_agent``: sum of
    ``grad phi(Z_k - X_i)``; ``agent_on_obs``: sum of ``grad phi(X_i - Z_k)``.
    """

    J: np.ndarray
    rep: np.ndarray
    obs_on_agent: np.ndarray
    agent_on_obs: np.ndarray


def pair_sums(state: ParticleState, params: ModelParams) -> PairSums:
    nc_agent = cell_count(params.L, max(params.rA, params.rR))
    nc_obs = cell_count(params.L, params.tau)
    out = _pair_sums(
        np.ascontiguousarray(state.X, dtype=float).reshape(-1, 2),
        np.ascontiguousarray(state.Z, dtype=float).reshape(-1, 2),
        np.ascontiguousarray(state.theta, dtype=float),
        float(params.L), nc_agent, nc_obs, float(params.rA), float(params.rR), float(params.tau),
        grad_phi_coef(params.tau, params.Cphi), grad_psi_coef(params.mu, params.rR),
    )
    return PairSums(*out)


def step(state: ParticleState, params: ModelParams, cfg: RunConfig,
         rng: np.random.Generator) -> ParticleState:
    """Advance the system by one Euler-Maruyama step of size ``cfg.dt``."""
    dt = cfg.dt
    L = params.L
    N, M = state.X.shape[0], state.Z.shape[0]
    sums = pair_sums(state, params)
    xi_obs = rng.standard_normal((N, 2))
    xi_agent = rng.standard_normal(M)

    X = state.X
    if N:
        drift = -(params.kappa / params.eta) * minimum_image(X - state.Y, L)
        if M:
            drift -= sums.agent_on_obs / (params.eta * M)
        X = X + dt * drift + math.sqrt(2.0 * params.d0 * dt) * xi_obs
        X = np.mod(X, L)

    Z = state.Z
    theta = state.theta
    if M:
        alpha = np.column_stack((np.cos(theta), np.sin(theta)))
        vel = params.u0 * alpha
        if N:
            vel -= sums.obs_on_agent / (params.zeta * N)
        vel -= sums.rep / (params.zeta * M)
        Z = np.mod(Z + dt * vel, L)

        norm = np.hypot(sums.J[:, 0], sums.J[:, 1])
        target = np.where(norm < J_EPS, theta, np.arctan2(sums.J[:, 1], sums.J[:, 0]))
        theta = theta + dt * params.nu * np.sin(target - theta) \
            + math.sqrt(2.0 * params.ds * dt) * xi_agent
        theta = np.mod(theta, TWO_PI)

    t = state.t + dt
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z)) and np.all(np.isfinite(theta))):
        raise NonFiniteError("particle state became non-finite", t)
    # np.mod can return L for tiny negative inputs
    X[X >= L] -= L
    Z[Z >= L] -= L
    return ParticleState(t, X, state.Y, Z, theta)


def run(params: ModelParams, cfg: RunConfig, state: ParticleState | None = None,
        out_dir: str | Path | None = None, callback=None) -> list[ParticleState]:
    """Integrate to ``cfg.t_end``, keeping a snapshot every ``snapshot_every`` steps.

    The initial state and the final state are always included. With
    ``out_dir`` the snapshots and a ``metrics.csv`` (t, order_parameter) are
    written as they are produced.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    if state is None:
        state = init_uniform(params, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.csv", "w", newline="")
        mw = csv.writer(metrics)
        mw.writerow(["t", "order_parameter"])

    snaps: list[ParticleState] = []

    def record(s: ParticleState, idx: int):
        snaps.append(s.copy())
        if out is not None:
            write_snapshot(s, out / f"snapshot_{idx:06d}.csv")
            mw.writerow([float(s.t), float(order_parameter(s)) if s.theta.size else ""])
        if callback is not None:
            callback(s)

    try:
        record(state, 0)
        n = cfg.n_steps
        for i in range(1, n + 1):
            try:
                state = step(state, params, cfg, rng)
            except NonFiniteError as exc:
                raise NonFiniteError("particle state became non-finite", exc.t) from None
            if i % cfg.snapshot_every == 0 or i == n:
                record(state, i)
    finally:
        if out is not None:
            metrics.close()
    return snaps


# --------------------------------------------------------------------------
# snapshot files

SNAPSHOT_HEADER = ["kind", "id", "x", "y", "theta_or_anchor_x", "anchor_y"]


def write_snapshot(state: ParticleState, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_HEADER)
        for k in range(state.Z.shape[0]):
            w.writerow(["agent", k, float(state.Z[k, 0]), float(state.Z[k, 1]), float(state.theta[k]), ""])
        for i in range(state.X.shape[0]):
            w.writerow(["obstacle", i, float(state.X[i, 0]), float(state.X[i, 1]),
                        float(state.Y[i, 0]), float(state.Y[i, 1])])


def read_snapshot(path: str | Path, t: float = 0.0) -> ParticleState:
    agents: list[tuple] = []
    obstacles: list[tuple] = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != SNAPSHOT_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in r:
            kind, idx = row[0], int(row[1])
            if kind == "agent":
                agents.append((idx, float(row[2]), float(row[3]), float(row[4])))
            elif kind == "obstacle":
                obstacles.append((idx, float(row[2]), float(row[3]), float(row[4]), float(row[5])))
            else:
                raise ValueError(f"{path}: unknown particle kind {kind!r}")
    agents.sort()
    obstacles.sort()
    A = np.array([a[1:] for a in agents]).reshape(-1, 3)
    O = np.array([o[1:] for o in obstacles]).reshape(-1, 4)
    return ParticleState(t, O[:, :2].copy(), O[:, 2:].copy(), A[:, :2].copy(), A[:, 2].copy())


def with_time(state: ParticleState, t: float) -> ParticleState:
    return replace(state, t=t)
