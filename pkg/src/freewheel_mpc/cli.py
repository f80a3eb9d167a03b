"""Command-line entry point.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Values are SI; speeds may carry an explicit ``km/h`` suffix and angular
speeds an ``rpm`` suffix. ``--set key=value`` flags override the file.
Recognised keys are listed in ``DEFAULTS``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import clarabel
import numpy as np
import scipy

from .accounting import compare_policies, decompose, loss_report
from .bnb import BnbLimits
from .corridor import KMH, CorridorSettings, make_corridor
from .cycle import CycleError, CycleSpec, DrivingCycle, generate_synthetic_cycle, load_cycle, save_cycle
from .mpc import MpcConfig, MpcInfeasible, SolverLimit, TuningError, run_mpc, tune_beta_t
from .ocp import InfeasibleInstance, policy_config
from .vehicle import RPM, EngineParams, VehicleParams, VehicleStopped

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4

POLICIES = ("benchmark", "no-freewheel", "freewheel-idle", "freewheel-off")

_V = VehicleParams()
_E = EngineParams()

# key -> (default, unit kind); kind selects the accepted suffixes
DEFAULTS = {
    **{f"vehicle.{k}": (getattr(_V, k), "") for k in ("m", "r_w", "c_d", "rho", "A_f", "c_r", "g",
                                                      "F_t_max", "F_b_max", "P_max")},
    "engine.omega_c": (_E.omega_c, "angular"),
    "engine.omega_o": (_E.omega_o, "angular"),
    "engine.T_d0": (_E.T_d0, ""),
    "engine.T_d1": (_E.T_d1, ""),
    "engine.J_e": (_E.J_e, ""),
    "corridor.benchmark.delta_v": (1 * KMH, "speed"),
    "corridor.benchmark.n_sigma": (0.5, ""),
    "corridor.benchmark.a_l": (0.3, ""),
    "corridor.benchmark.a_u": (0.4, ""),
    "corridor.wide.delta_v": (4 * KMH, "speed"),
    "corridor.wide.n_sigma": (1.0, ""),
    "corridor.wide.a_l": (0.25, ""),
    "corridor.wide.a_u": (0.6, ""),
    "corridor.power_fraction": (0.95, ""),
    "mpc.N_H": (60, "int"),
    "mpc.delta_s": (15.0, ""),
    "mpc.beta_t": (3e4, ""),
    "mpc.sqp_passes": (1, "int"),
    "mpc.drag_mode": ("mccormick", "str"),
    "solver.node_limit": (4, "int"),
    "solver.local_search": (2, "int"),
    "solver.time_limit": (0.0, ""),  # 0 disables
    "tune.rel_tol": (0.001, ""),
    "tune.max_iter": (20, "int"),
    "cycle.seed": (0, "int"),
    "cycle.length_m": (6000.0, ""),
    "cycle.grade_bound": (0.043, ""),
    "run.workers": (1, "int"),
}


class ConfigError(ValueError):
    pass


def parse_value(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = DEFAULTS[key][1]
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        low = raw.lower().replace(" ", "")
        if low.endswith("km/h"):
            if kind != "speed":
                raise ConfigError(f"{key}: km/h suffix only valid for speeds")
            return float(low[:-4]) * KMH
        if low.endswith("rpm"):
            if kind != "angular":
                raise ConfigError(f"{key}: rpm suffix only valid for angular speeds")
            return float(low[:-3]) * RPM
        return float(low)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def read_config(path: Path | None, overrides=()) -> dict:
    values = {k: v for k, (v, _) in DEFAULTS.items()}
    if path is not None:
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for no, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{no}: expected key = value")
            k, v = (t.strip() for t in line.split("=", 1))
            try:
                values[k] = parse_value(k, v)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{no}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (t.strip() for t in item.split("=", 1))
        values[k] = parse_value(k, v)
    return values


@dataclass
class RunConfig:
    values: dict
    vehicle: VehicleParams
    engine: EngineParams
    benchmark_corridor: CorridorSettings
    wide_corridor: CorridorSettings
    limits: BnbLimits

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        try:
            vp = VehicleParams(**{k.split(".", 1)[1]: float(v) for k, v in values.items() if k.startswith("vehicle.")})
            ep = EngineParams(**{k.split(".", 1)[1]: float(v) for k, v in values.items() if k.startswith("engine.")})

            def corr(tag):
                return CorridorSettings(**{f: values[f"corridor.{tag}.{f}"] for f in ("delta_v", "n_sigma", "a_l", "a_u")})

            bench, wide = corr("benchmark"), corr("wide")
            tl = values["solver.time_limit"]
            limits = BnbLimits(node_limit=values["solver.node_limit"], local_search=values["solver.local_search"],
                               time_limit=tl if tl > 0 else None)
            if values["mpc.drag_mode"] not in ("mccormick", "frozen"):
                raise ValueError("mpc.drag_mode must be 'mccormick' or 'frozen'")
            if not 0 < values["corridor.power_fraction"] <= 1:
                raise ValueError("corridor.power_fraction must lie in (0, 1]")
            if values["run.workers"] < 1:
                raise ValueError("run.workers must be >= 1")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(values, vp, ep, bench, wide, limits)

    def policy(self, name: str):
        try:
            return policy_config(name, self.engine, self.benchmark_corridor, self.wide_corridor)
        except ValueError as exc:
            raise ConfigError(f"{exc}") from None

    def mpc(self, name: str, beta_t: float | None = None) -> MpcConfig:
        v = self.values
        try:
            return MpcConfig(self.policy(name), v["mpc.N_H"], v["mpc.delta_s"],
                             v["mpc.beta_t"] if beta_t is None else beta_t,
                             v["mpc.sqp_passes"], v["mpc.drag_mode"], self.limits)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def corridor(self, cycle: DrivingCycle, name: str):
        return make_corridor(cycle, self.policy(name).corridor, self.vehicle, self.engine,
                             power_fraction=self.values["corridor.power_fraction"])

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, rc: RunConfig, argv, inputs=(), seed=None) -> None:
    from . import __version__

    outputs = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": rc.values,
        "config_sha256": rc.digest(),
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "versions": {
            "freewheel_mpc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "clarabel": getattr(clarabel, "__version__", "unknown"),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_cycle(rc: RunConfig, path: Path | None) -> DrivingCycle:
    if path is None:
        spec = CycleSpec(length_m=rc.values["cycle.length_m"], delta_s=rc.values["mpc.delta_s"],
                         grade_bound=rc.values["cycle.grade_bound"])
        return generate_synthetic_cycle(rc.values["cycle.seed"], spec)
    if not path.is_file():
        raise ConfigError(f"cycle file not found: {path}")
    try:
        return load_cycle(path, delta_s=rc.values["mpc.delta_s"])
    except CycleError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _prepare(args) -> tuple[RunConfig, Path]:
    rc = RunConfig.from_values(read_config(args.config, args.set))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from None
    return rc, out


def _fname(policy: str) -> str:
    return policy.replace("_", "-")


def cmd_simulate(args) -> int:
    rc, out = _prepare(args)
    rc.policy(args.policy)  # validate the name before any work
    cycle = _load_cycle(rc, args.cycle)
    cfg = rc.mpc(args.policy, args.beta_t)
    vc = rc.corridor(cycle, args.policy)
    rec = run_mpc(cycle, vc, rc.vehicle, rc.engine, cfg)
    name = _fname(args.policy)
    rec.save_csv(out / f"trajectory_{name}.csv")
    vc.save_csv(out / f"corridor_{name}.csv")
    (out / f"losses_{name}.txt").write_text(loss_report(decompose(rec, rc.vehicle)))
    write_manifest(out, "simulate", rc, sys.argv, [args.cycle] if args.cycle else [],
                   None if args.cycle else rc.values["cycle.seed"])
    print(f"{args.policy}: trip time {rec.trip_time:.1f} s, wrote {out}")
    return EXIT_OK


def _tune_job(rc: RunConfig, cycle: DrivingCycle, name: str, target: float, beta0: float):
    vc = rc.corridor(cycle, name)
    res = tune_beta_t(target, cycle, vc, rc.vehicle, rc.engine, rc.mpc(name, beta0),
                      rel_tol=rc.values["tune.rel_tol"], max_iter=rc.values["tune.max_iter"])
    return name, res.beta_t, res.record, vc


def cmd_compare(args) -> int:
    rc, out = _prepare(args)
    cycle = _load_cycle(rc, args.cycle)
    vc = rc.corridor(cycle, "benchmark")
    bench = run_mpc(cycle, vc, rc.vehicle, rc.engine, rc.mpc("benchmark"))
    target = bench.trip_time
    records = {"benchmark": bench}
    corridors = {"benchmark": vc}
    betas = {"benchmark": bench.beta_t}
    others = [p.replace("-", "_") for p in POLICIES[1:]]
    workers = rc.values["run.workers"]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_tune_job, rc, cycle, n, target, rc.values["mpc.beta_t"]) for n in others]
            results = [f.result() for f in futs]
    else:
        # sequential runs start each search from the previous policy's value
        results, beta = [], rc.values["mpc.beta_t"]
        for n in others:
            results.append(_tune_job(rc, cycle, n, target, beta))
            # warm-start the next policy unless tuning collapsed to (near) zero
            if results[-1][1] >= 1.0:
                beta = results[-1][1]
    for name, beta, rec, c in results:
        records[name], betas[name], corridors[name] = rec, beta, c

    for name, rec in records.items():
        rec.save_csv(out / f"trajectory_{_fname(name)}.csv")
        corridors[name].save_csv(out / f"corridor_{_fname(name)}.csv")
    cmp = compare_policies(records, rc.vehicle)
    table = cmp.table()
    (out / "comparison.txt").write_text(table + "\n")
    kv = cmp.key_values() + "".join(f"{n}.beta_t={b!r}\n" for n, b in betas.items())
    (out / "comparison.kv").write_text(kv)
    write_manifest(out, "compare", rc, sys.argv, [args.cycle] if args.cycle else [],
                   None if args.cycle else rc.values["cycle.seed"])
    print(table)
    return EXIT_OK


def cmd_gen_cycle(args) -> int:
    if not args.length > 0:
        raise ConfigError("--length must be > 0")
    spec = CycleSpec(length_m=args.length * 1000.0, delta_s=args.delta_s, grade_bound=args.grade_bound)
    c = generate_synthetic_cycle(args.seed, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cycle(c, out)
    print(f"wrote {len(c)} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freewheel-mpc", description="Look-ahead freewheeling MPC for a heavy truck.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, cycle_required):
        p.add_argument("--cycle", type=Path, required=cycle_required,
                       help="cycle CSV (s_m,grade,v_ref_mps)" + ("" if cycle_required else "; default: synthetic"))
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True, help="output directory")

    sim = sub.add_parser("simulate", help="closed-loop run of one policy")
    common(sim, cycle_required=False)
    sim.add_argument("--policy", required=True, help=", ".join(POLICIES))
    sim.add_argument("--beta-t", type=float, default=None, help="trip-time penalty in W (overrides config)")
    sim.set_defaults(func=cmd_simulate)

    cmp = sub.add_parser("compare", help="tune and run all four policies")
    common(cmp, cycle_required=False)
    cmp.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-cycle", help="write a synthetic cycle CSV")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--length", type=float, required=True, help="km")
    gen.add_argument("--out", required=True)
    gen.add_argument("--delta-s", type=float, default=15.0, help="sample spacing, m")
    gen.add_argument("--grade-bound", type=float, default=0.043)
    gen.set_defaults(func=cmd_gen_cycle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MpcInfeasible, InfeasibleInstance, VehicleStopped, TuningError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverLimit as exc:
        print(f"solver limit: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
