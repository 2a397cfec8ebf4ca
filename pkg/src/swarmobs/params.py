"""Model parameters and the flat ``key=value`` parameter-file format."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ParameterError

# Parameters that may be zero (noise, repulsion, coupling switched off).
_NON_NEGATIVE = {"d0", "mu", "ds", "Cphi"}
_INTEGER = {"N", "M"}


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters of the agent/obstacle system.

    Defaults follow the discrete-simulation table (``N = M = 3000``,
    ``rR = 0.075``, ``rA = 0.1``, ...) with ``kappa = 100``, ``zeta = 0.5``
    and ``mu = 2e-3`` picked for the three swept parameters.
    """

    N: int = 3000
    M: int = 3000
    u0: float = 1.0
    rR: float = 0.075
    rA: float = 0.1
    nu: float = 2.0
    ds: float = 0.02
    tau: float = 0.15
    Cphi: float = 5.0
    mu: float = 2e-3
    kappa: float = 100.0
    eta: float = 1.0
    zeta: float = 0.5
    d0: float = 0.0
    rhoA: float = 1.0
    L: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _INTEGER:
                if int(v) != v or v < 0:
                    raise ParameterError(f"{f.name} must be a non-negative integer, got {v!r}")
                object.__setattr__(self, f.name, int(v))
                continue
            v = float(v)
            object.__setattr__(self, f.name, v)
            if not math.isfinite(v):
                raise ParameterError(f"{f.name} must be finite, got {v!r}")
            if f.name in _NON_NEGATIVE:
                if v < 0:
                    raise ParameterError(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ParameterError(f"{f.name} must be > 0, got {v}")
        if self.epsilon > 1:
            raise ParameterError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @property
    def gamma(self) -> float:
        """Obstacle relaxation ratio eta/kappa."""
        return self.eta / self.kappa

    @property
    def delta(self) -> float:
        return self.d0 * self.gamma

    @property
    def ds_over_nu(self) -> float:
        return self.ds / self.nu

    def replace(self, **changes) -> "ModelParams":
        unknown = set(changes) - set(field_names())
        if unknown:
            raise ParameterError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def hash(self) -> str:
        """Short stable hash of the canonical parameter text."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def field_names() -> list[str]:
    return [f.name for f in fields(ModelParams)]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParameterError(f"line {lineno}: empty key")
        if key in out:
            raise ParameterError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def params_from_mapping(values: dict, base: ModelParams | None = None) -> ModelParams:
    """Build parameters from a mapping of field name to value (strings allowed)."""
    names = set(field_names())
    unknown = set(values) - names
    if unknown:
        raise ParameterError(f"unknown parameter key(s): {', '.join(sorted(unknown))}")
    conv = {}
    for k, v in values.items():
        try:
            conv[k] = int(v) if k in _INTEGER else float(v)
        except (TypeError, ValueError):
            raise ParameterError(f"{k}: cannot parse {v!r} as a number") from None
    return dataclasses.replace(base or ModelParams(), **conv)


def parse_params(text: str, base: ModelParams | None = None) -> ModelParams:
    return params_from_mapping(parse_key_values(text), base)


def load_params(path: str | Path, base: ModelParams | None = None) -> ModelParams:
    return parse_params(Path(path).read_text(), base)


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(params.to_text())


def apply_epsilon(params: ModelParams, epsilon: float) -> ModelParams:
    """Rescale the micro parameters towards the continuum limit.

    ``rR -> eps*rR``, ``rA -> sqrt(eps)*rA``, ``ds -> ds/eps``,
    ``nu -> nu/eps``; everything else is kept.
    """
    if not 0 < epsilon <= 1:
        raise ParameterError(f"epsilon must lie in (0, 1], got {epsilon}")
    return dataclasses.replace(
        params,
        rR=epsilon * params.rR,
        rA=math.sqrt(epsilon) * params.rA,
        ds=params.ds / epsilon,
        nu=params.nu / epsilon,
        epsilon=epsilon,
    )


def continuum_params(**changes) -> ModelParams:
    """Parameters used for continuum runs: ``rA = 0.15`` and ``ds/nu = 0.01``."""
    return ModelParams(rA=0.15, nu=2.0, ds=0.02).replace(**changes)
