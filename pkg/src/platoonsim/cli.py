"""Command line entry point: ``platoonsim {run,throughput,sweep,validate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import analysis
from .sim import BUILTIN, RunTrace, Scenario, apply_overrides, load_scenario, run

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_USAGE = 64


def resolve_scenario(spec: str, overrides: Sequence[str] = (), seed: Optional[int] = None
                     ) -> Scenario:
    """A YAML path or the name of a built-in scenario, with ``key=value`` overrides."""
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    if Path(spec).is_file():
        return load_scenario(spec, overrides)
    if spec in BUILTIN:
        return Scenario.from_dict(apply_overrides(BUILTIN[spec]().to_dict(), overrides))
    raise ValueError(f"{spec!r} is neither a scenario file nor one of {sorted(BUILTIN)}")


def _print_violations(bad: List[str]) -> None:
    for line in bad:
        print(f"VIOLATION {line}")


def cmd_run(args) -> int:
    sc = resolve_scenario(args.scenario, args.overrides, args.seed)
    trace = run(sc)
    out = trace.write(args.out)
    s = trace.summary
    print(f"wrote {out}/trace.csv ({s['ticks']} ticks)")
    for key in ("min_leader_headway_m", "min_follower_headway_m",
                "min_stopped_dist_to_stopbar_m", "max_tracking_error_after_3s_m"):
        if s.get(key) is not None:
            print(f"{key}: {s[key]:.3f}")
    for c in s.get("crossings", []):
        if c["vph"] is not None:
            print(f"light {c['light_id']}: {c['vph']:.0f} vph")
    bad = analysis.validate_trace(trace)
    _print_violations(bad)
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_throughput(args) -> int:
    trace = RunTrace.read(args.trace)
    t_L, t_R = analysis.crossing_times(trace, args.intersection_length, args.stopbar)
    vph = analysis.throughput_vph(t_L, t_R, trace.n_vehicles)
    print(json.dumps({"t_L_s": round(t_L, 6), "t_rear_s": round(t_R, 6), "vph": round(vph, 3)}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = resolve_scenario(args.scenario, args.overrides, args.seed)
    F_values = args.F or [sc.mpc.horizon_steps, 0]
    results = analysis.trust_sweep(sc, F_values, jobs=args.jobs)
    table = analysis.sweep_table(results)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(
            [r.__dict__ for r in results], indent=1))
    return EXIT_OK


def cmd_validate(args) -> int:
    trace = RunTrace.read(args.trace)
    limits = analysis.InvariantLimits(args.d_min_front, args.d_min_stopbar, args.v_max,
                                      args.tolerance)
    bad = analysis.validate_trace(trace, limits)
    _print_violations(bad)
    if not bad:
        print(f"ok: {len(trace.rows)} ticks, {trace.n_vehicles} vehicles")
    return EXIT_INVARIANT if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="platoonsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(q, default=None):
        q.add_argument("--scenario", default=default, required=default is None,
                       help=f"YAML file or built-in name ({', '.join(sorted(BUILTIN))})")
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("overrides", nargs="*", metavar="key=value",
                       help="dotted overrides, e.g. mpc.trust_horizon=5")

    q = sub.add_parser("run", help="simulate a scenario and write the trace")
    scenario_args(q)
    q.add_argument("--out", default="out")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("throughput", help="vph from a recorded trace")
    q.add_argument("trace", help="trace directory or trace.csv")
    q.add_argument("--intersection-length", type=float, default=20.0)
    q.add_argument("--stopbar", type=float, default=0.0, help="stop bar position [m]")
    q.set_defaults(func=cmd_throughput)

    q = sub.add_parser("sweep", help="throughput for several trust horizons")
    scenario_args(q, default="throughput")
    q.add_argument("--F", type=int, nargs="+", default=None, help="trust horizons to run")
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_sweep)

    q = sub.add_parser("validate", help="check safety invariants over a trace")
    q.add_argument("trace", help="trace directory or trace.csv")
    q.add_argument("--d-min-front", type=float, default=6.0)
    q.add_argument("--d-min-stopbar", type=float, default=5.0)
    q.add_argument("--v-max", type=float, default=20.0)
    q.add_argument("--tolerance", type=float, default=0.1)
    q.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
