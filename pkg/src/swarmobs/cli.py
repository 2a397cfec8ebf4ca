"""Command-line front end: single runs, sweeps, stability scans and comparisons.

Every subcommand reads an optional ``key=value`` parameter file
(``--params``) and accepts one flag per model parameter (``--mu 2e-3``)
that overrides it. Sweep configurations use the same format with a few
extra keys, see :func:`parse_sweep_spec`.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ibm, patterns, pde, stability
from .errors import SwarmObsError
from .params import (ModelParams, apply_epsilon, continuum_params, field_names, load_params,
                     parse_key_values, params_from_mapping, save_params)

MODES = ("ibm", "pde", "stability", "compare")

# run options understood by each mode, with defaults
RUN_DEFAULTS = {
    "ibm": {"dt": 1e-3, "t_end": 10.0, "snapshot_every": 1000},
    "pde": {"nx": 64, "t_end": 10.0, "amplitude": 0.01, "order": 2, "snapshot_dt": 0.0,
            "blowup_factor": 50.0},
    "stability": {"k_max": 0.0, "n_scan": 4096, "lattice_length": 0.0},
    "compare": {"nx": 64, "t_macro": 10.0, "t_micro": 1.0, "dt": 1e-3, "N_points": 0,
                "amplitude": 0.01},
}

MANIFEST_COLUMNS = ["cell_index", "mode", "cell_hash", "seed", "epsilon", "params", "status",
                    "stop_cause", "message", "files", "artifact_sha256"]


# --------------------------------------------------------------------------
# sweep specification

@dataclass
class SweepSpec:
    base: ModelParams
    axes: dict[str, list[float]]
    mode: str
    epsilons: list[float] = field(default_factory=lambda: [1.0])
    seed: int = 0
    options: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        names = set(field_names())
        bad = [a for a in self.axes if a not in names]
        if bad:
            raise ValueError(f"sweep axes are not model parameters: {', '.join(bad)}")
        unknown = set(self.options) - set(RUN_DEFAULTS[self.mode])
        if unknown:
            raise ValueError(f"unknown run option(s) for mode {self.mode}: {', '.join(sorted(unknown))}")
        for e in self.epsilons:
            if not 0 < e <= 1:
                raise ValueError(f"epsilon must lie in (0, 1], got {e}")

    @property
    def size(self) -> int:
        n = len(self.epsilons) if self.mode == "compare" else 1
        for v in self.axes.values():
            n *= len(v)
        return n

    def run_options(self) -> dict:
        opts = dict(RUN_DEFAULTS[self.mode])
        opts.update(self.options)
        return opts

    def cells(self) -> list[tuple[int, ModelParams, float]]:
        """Cartesian product in axis order; compare mode appends the epsilon axis."""
        names = list(self.axes)
        eps = self.epsilons if self.mode == "compare" else [1.0]
        out = []
        combos = itertools.product(*(self.axes[n] for n in names)) if names else [()]
        for idx, (vals, e) in enumerate(itertools.product(list(combos), eps)):
            p = self.base.replace(**dict(zip(names, vals)))
            out.append((idx, p, e))
        return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def parse_sweep_spec(text: str) -> SweepSpec:
    """Sweep file: model parameters as ``key=value`` plus

    ``mode=ibm|pde|stability|compare``, ``seed=<int>``,
    ``axis.<param>=v1,v2,...``, ``epsilon=e1,e2,...`` and
    ``run.<option>=value`` (see ``RUN_DEFAULTS``).
    """
    kv = parse_key_values(text)
    mode = kv.pop("mode", None)
    if mode is None:
        raise ValueError("sweep file needs a mode= line")
    seed = int(kv.pop("seed", "0"))
    eps = _floats(kv.pop("epsilon", "1"))
    axes = {k[5:]: _floats(v) for k, v in kv.items() if k.startswith("axis.")}
    opts = {k[4:]: float(v) for k, v in kv.items() if k.startswith("run.")}
    plain = {k: v for k, v in kv.items() if not (k.startswith("axis.") or k.startswith("run."))}
    base = params_from_mapping(plain, continuum_params() if mode in ("pde", "stability", "compare")
                               else ModelParams())
    return SweepSpec(base, axes, mode, eps, seed, opts)


def cell_seed(base_seed: int, index: int) -> int:
    """Deterministic per-cell seed derived from the sweep seed and cell index."""
    digest = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def cell_hash(mode: str, params: ModelParams, epsilon: float, seed: int, options: dict) -> str:
    blob = json.dumps({"mode": mode, "params": params.to_text(), "epsilon": epsilon,
                       "seed": seed, "options": options}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _files_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# cell runners (each returns stop cause and written files)

def run_ibm_cell(params: ModelParams, seed: int, opts: dict, out: Path):
    cfg = ibm.RunConfig(dt=opts["dt"], t_end=opts["t_end"], seed=seed,
                        snapshot_every=int(opts["snapshot_every"]))
    save_params(params, out / "params.txt")
    ibm.run(params, cfg, out_dir=out)
    return "t_end", sorted(out.iterdir())


def _pde_config(opts) -> pde.SolverConfig:
    return pde.SolverConfig(order=int(opts.get("order", 2)),
                            blowup_factor=float(opts.get("blowup_factor", 50.0)),
                            snapshot_dt=float(opts.get("snapshot_dt", 0.0)) or None)


def run_pde_cell(params: ModelParams, seed: int, opts: dict, out: Path):
    save_params(params, out / "params.txt")
    f0 = pde.init_perturbed(params, int(opts["nx"]), float(opts["amplitude"]), seed)
    res = pde.run_pde(f0, params, float(opts["t_end"]), _pde_config(opts))
    for k, snap in enumerate(res.snapshots):
        pde.write_field(snap, params, out / f"field_{k:04d}")
    S1, S2 = patterns.dft_pattern_sizes(res.final.rho)
    summary = {"stop_cause": res.stop_cause, "t_stop": res.t_stop, "steps": res.steps,
               "mass_drift": res.mass_drift, "norm_error": res.norm_error,
               "max_ratio": res.max_ratio, "S1": S1, "S2": S2,
               "classification": classify(S1, S2),
               "b_p": stability.bifurcation_parameter(params),
               "events": [[e.t, e.kind, e.detail] for e in res.events]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return res.stop_cause, sorted(out.iterdir())


def classify(S1: float, S2: float) -> str:
    if S1 == 0 and S2 == 0:
        return "uniform"
    if S2 == 0:
        return "bands"
    if S1 == 0:
        return "perpendicular_bands"
    return "patterned"


def run_stability_cell(params: ModelParams, seed: int, opts: dict, out: Path):
    save_params(params, out / "params.txt")
    rows = stability.stability_region([params], k_max=float(opts["k_max"]) or None,
                                      n_scan=int(opts["n_scan"]),
                                      lattice_length=float(opts["lattice_length"]) or None)
    stability.write_stability_csv(rows, out / "stability.csv")
    return "t_end", sorted(out.iterdir())


_MACRO_CACHE: dict = {}


def macro_field(params: ModelParams, seed: int, opts: dict) -> pde.PDERun:
    key = (params.hash(), seed, int(opts["nx"]), float(opts["t_macro"]), float(opts["amplitude"]))
    if key not in _MACRO_CACHE:
        f0 = pde.init_perturbed(params, int(opts["nx"]), float(opts["amplitude"]), seed)
        _MACRO_CACHE[key] = pde.run_pde(f0, params, float(opts["t_macro"]))
    return _MACRO_CACHE[key]


def run_compare_cell(params: ModelParams, epsilon: float, seed: int, opts: dict, out: Path,
                     macro_seed: int | None = None):
    """Continuum run with ``params``, particle run with ``apply_epsilon(params, epsilon)``."""
    micro_params = apply_epsilon(params, epsilon)
    save_params(micro_params, out / "params.txt")
    macro = macro_field(params, seed if macro_seed is None else macro_seed, opts)
    cfg = ibm.RunConfig(dt=float(opts["dt"]), t_end=float(opts["t_micro"]), seed=seed,
                        snapshot_every=10 ** 9)
    micro = ibm.run(micro_params, cfg)[-1]
    n_pts = int(opts["N_points"]) or micro_params.M
    rep = patterns.compare(macro.final, micro, n_pts, seed)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(patterns.ComparisonReport.CSV_COLUMNS))
        w.writeheader()
        w.writerow(rep.to_row(params.hash(), epsilon))
    pde.write_field(macro.final, params, out / "macro")
    ibm.write_snapshot(micro, out / "micro.csv")
    return macro.stop_cause, sorted(out.iterdir())


def _run_cell(args):
    mode, idx, params, eps, seed, opts, out, macro_seed = args
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    row = {"cell_index": idx, "mode": mode, "cell_hash": out.name, "seed": seed, "epsilon": eps,
           "params": params.to_text().strip().replace("\n", ";"), "status": "ok",
           "stop_cause": "", "message": "", "files": "", "artifact_sha256": ""}
    try:
        if mode == "ibm":
            cause, files = run_ibm_cell(params, seed, opts, out)
        elif mode == "pde":
            cause, files = run_pde_cell(params, seed, opts, out)
        elif mode == "stability":
            cause, files = run_stability_cell(params, seed, opts, out)
        else:
            cause, files = run_compare_cell(params, eps, seed, opts, out, macro_seed)
        row["stop_cause"] = cause
        if cause != "t_end":
            row["status"] = "stopped"
        row["files"] = ";".join(str(Path(f).relative_to(out.parent.parent)) for f in files)
        row["artifact_sha256"] = _files_digest(files)
    except (SwarmObsError, ValueError, FloatingPointError, RuntimeError) as exc:
        row["status"] = "failed"
        row["message"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(spec: SweepSpec, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Run every cell of ``spec`` and append one manifest row per cell.

    Failures are recorded in the manifest and do not stop the sweep.
    """
    out_dir = Path(out_dir)
    opts = spec.run_options()
    n_eps = len(spec.epsilons) if spec.mode == "compare" else 1
    tasks = []
    for idx, p, eps in spec.cells():
        seed = cell_seed(spec.seed, idx)
        # every epsilon of one parameter combination is compared with the same continuum run
        macro_seed = cell_seed(spec.seed, idx // n_eps)
        h = cell_hash(spec.mode, p, eps, seed, opts)
        tasks.append((spec.mode, idx, p, eps, seed, opts, str(out_dir / spec.mode / h), macro_seed))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    append_manifest(rows, out_dir / "manifest.csv")
    return rows


def append_manifest(rows, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# argument parsing

def _add_param_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--params", help="key=value parameter file")
    g = ap.add_argument_group("model parameters (override the file)")
    for name in field_names():
        g.add_argument(f"--{name}", type=float, default=None, metavar="V")


def _params_from_args(args, base: ModelParams) -> ModelParams:
    p = load_params(args.params, base) if args.params else base
    over = {n: getattr(args, n) for n in field_names() if getattr(args, n) is not None}
    return params_from_mapping(over, p) if over else p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarmobs", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ibm-run", help="integrate the particle system")
    _add_param_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--snapshot-every", type=int, default=1000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pde-run", help="solve the continuum model")
    _add_param_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--nx", type=int, default=150)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--amplitude", type=float, default=0.01)
    p.add_argument("--order", type=int, choices=(1, 2), default=2)
    p.add_argument("--snapshot-dt", type=float, default=0.0)
    p.add_argument("--blowup-factor", type=float, default=50.0)
    p.add_argument("--csv", action="store_true", help="also write CSV fields")
    p.add_argument("--points", type=int, default=0, help="write sampled point clouds of this size")
    p.add_argument("--out", required=True)

    p = sub.add_parser("stability-scan", help="linear stability table")
    _add_param_flags(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help="parameter values to scan (repeatable; cartesian product)")
    p.add_argument("--k-max", type=float, default=0.0)
    p.add_argument("--n-scan", type=int, default=4096)
    p.add_argument("--lattice-length", type=float, default=0.0,
                   help="restrict to wave vectors of a periodic box of this side")
    p.add_argument("--out", required=True, help="CSV file")

    p = sub.add_parser("compare", help="continuum versus particle comparison")
    _add_param_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epsilons", default="1", help="comma-separated epsilon list")
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--t-macro", type=float, default=10.0)
    p.add_argument("--t-micro", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run a sweep file")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the sweep seed")
    return ap


def _status_code(rows) -> int:
    return 0 if all(r["status"] in ("ok", "stopped") for r in rows) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command
    try:
        if cmd == "ibm-run":
            params = _params_from_args(args, ModelParams())
            spec = SweepSpec(params, {}, "ibm", seed=args.seed,
                             options={"dt": args.dt, "t_end": args.t_end,
                                      "snapshot_every": args.snapshot_every})
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            run_ibm_cell(params, args.seed, spec.run_options(), out)
            print(f"wrote {out}")
            return 0
        if cmd == "pde-run":
            params = _params_from_args(args, continuum_params())
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            opts = {"nx": args.nx, "t_end": args.t_end, "amplitude": args.amplitude,
                    "order": args.order, "snapshot_dt": args.snapshot_dt,
                    "blowup_factor": args.blowup_factor}
            cause, _ = run_pde_cell(params, args.seed, opts, out)
            if args.csv or args.points:
                summary_fields = sorted(out.glob("field_*.json"))
                f, _, _ = pde.read_field(summary_fields[-1].with_suffix(""))
                if args.csv:
                    pde.write_field_csv(f, params, out / "final_field.csv")
                if args.points:
                    pde.write_point_cloud(f, params, out / "final_points.csv", args.points, args.seed)
            print(f"stop cause: {cause}; wrote {out}")
            return 0
        if cmd == "stability-scan":
            base = _params_from_args(args, continuum_params())
            axes = {}
            for a in args.axis:
                name, _, vals = a.partition("=")
                axes[name.strip()] = _floats(vals)
            spec = SweepSpec(base, axes, "stability")
            plist = [p for _, p, _ in spec.cells()]
            rows = stability.stability_region(plist, k_max=args.k_max or None, n_scan=args.n_scan,
                                              lattice_length=args.lattice_length or None)
            stability.write_stability_csv(rows, args.out)
            print(f"{len(rows)} rows -> {args.out}")
            return 0
        if cmd == "compare":
            params = _params_from_args(args, continuum_params())
            spec = SweepSpec(params, {}, "compare", _floats(args.epsilons), args.seed,
                             {"nx": args.nx, "t_macro": args.t_macro, "t_micro": args.t_micro,
                              "dt": args.dt})
            rows = run_sweep(spec, args.out)
            for r in rows:
                print(r["epsilon"], r["status"], r["message"])
            return _status_code(rows)
        if cmd == "sweep":
            spec = parse_sweep_spec(Path(args.config).read_text())
            if args.seed is not None:
                spec.seed = args.seed
            if spec.mode in ("ibm", "pde", "compare") and args.seed is None \
                    and "seed" not in parse_key_values(Path(args.config).read_text()):
                raise SwarmObsError("stochastic sweeps need a seed (config seed= or --seed)")
            print(f"{spec.size} cell(s), mode {spec.mode}")
            rows = run_sweep(spec, args.out, args.jobs)
            bad = [r for r in rows if r["status"] == "failed"]
            for r in bad:
                print(f"cell {r['cell_index']} failed: {r['message']}", file=sys.stderr)
            return _status_code(rows)
    except (SwarmObsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
