"""Command-line entry point: ``orchardplan <command> [options]``.

Exit codes: 0 success, 1 validation or planning failure, 2 I/O or
configuration error, 3 backend or network error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bench as bench_mod
from .backends import LiveBackend, ReplayBackend, load_backend_config
from .decoder import DecodeError, RobotProfile, decode, load_robot_profile
from .geo import (
    DIRECTIONS,
    FarmError,
    GeoPoint,
    boundary_corners,
    farm_scale,
    load_farm_file,
    nearest_trees,
    trees_in_half,
)
from .l1 import PlanParseError, load_schema, parse_l1, serialize_l1, validate
from .mission import plan_stats, walk
from .mock import MockBackend
from .planner import BackendError, PlannerContext, PlannerError, UnrepairablePlan, generate_plan
from .simulator import SensorOutcomeTable, StochasticEdgeModel, execute
from .sop import SOPError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def data_path(name: str) -> Path:
    return Path(__file__).resolve().parent / "data" / name


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from None


def _farm(args):
    try:
        return load_farm_file(args.farm)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.farm}: {exc.strerror or exc}") from None
    except FarmError as exc:
        raise CliError(EXIT_IO, f"{args.farm}: {exc}") from None


def _schema(args):
    try:
        return load_schema(_read(args.schema))
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{args.schema}: {exc}") from None


def _robot(args) -> RobotProfile:
    try:
        return load_robot_profile(args.robot)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, str(exc)) from None


def _plan(args, schema=None):
    text = _read(args.plan)
    report = validate(text, schema)
    if not report.ok:
        raise CliError(EXIT_INVALID, f"{args.plan}:\n{report}")
    return parse_l1(text, schema)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    elif text:
        print(text)


# ---------------------------------------------------------------- commands


def cmd_plan(args) -> int:
    query = args.query if args.query is not None else sys.stdin.read()
    if not query.strip():
        raise CliError(EXIT_INVALID, "empty query")
    farm_text = _read(args.farm)
    _farm(args)
    schema_text = _read(args.schema)
    schema = _schema(args)
    profile = _robot(args)
    ctx = PlannerContext(schema_text, farm_text, tuple(sorted(profile.capabilities)))
    if args.backend == "mock":
        backend = MockBackend()
    else:
        try:
            cfg = load_backend_config(args.config)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_IO, str(exc)) from None
        live = LiveBackend(cfg)
        if args.backend == "live":
            backend = live
        else:
            if not cfg.replay_dir:
                raise CliError(EXIT_IO, f"{args.config}: replay_dir is not set")
            backend = ReplayBackend(cfg.replay_dir, cfg, record=live if args.record else None)
    try:
        result = generate_plan(query.strip(), ctx, backend, args.max_repairs, schema)
    except UnrepairablePlan as exc:
        raise CliError(EXIT_INVALID, f"plan still invalid after {args.max_repairs} repair round(s):\n{exc.report}") from None
    except BackendError as exc:
        raise CliError(EXIT_BACKEND, f"backend error: {exc}") from None
    except PlannerError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    plan = replace(result.plan, rationale=result.rationale)
    xml = serialize_l1(plan)
    if args.out:
        _write(args.out, xml)
    stats = plan_stats(plan)
    if args.json:
        _emit(args, {"plan": plan.name, "xml": xml, "rationale": result.rationale,
                     "repair_rounds": result.repair_rounds,
                     "stats": {"tasks": stats.task_count, "conditionals": stats.conditional_count}}, "")
    else:
        if not args.out:
            sys.stdout.write(xml)
        print(f"rationale: {result.rationale}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate(_read(args.plan), _schema(args))
    if args.json:
        _emit(args, {"valid": report.ok, "errors": [e._asdict() for e in report.errors]}, "")
    elif not report.ok:
        print(report, file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_INVALID


def _decoded(args):
    schema = _schema(args)
    plan = _plan(args, schema)
    farm = _farm(args)
    profile = _robot(args)
    if args.budget is not None:
        try:
            profile = replace(profile, distance_budget=args.budget)
        except ValueError as exc:
            raise CliError(EXIT_IO, f"--budget: {exc}") from None
    try:
        return plan, farm, profile, decode(plan, profile, farm)
    except DecodeError as exc:
        raise CliError(EXIT_INVALID, "\n".join(f"{code}: {what}" for code, what in exc.issues)) from None


def cmd_decode(args) -> int:
    _, _, _, ex = _decoded(args)
    targets = [{"task": n.task_type, "tree_id": n.params.get("tree_id"), "x": n.target.x, "y": n.target.y}
               for n in walk(ex.root) if getattr(n, "target", None) is not None]
    payload = {"plan": ex.name, "effective_budget": ex.effective_budget, "budget_m": ex.budget_m,
               "scale_m": ex.scale_m, "home": {"x": ex.home.x, "y": ex.home.y}, "navigation": targets}
    lines = [f"plan: {ex.name}", f"budget: {ex.effective_budget:g} normalized = {ex.budget_m:.1f} m",
             f"home: ({ex.home.x:.2f}, {ex.home.y:.2f})"]
    lines += [f"  {t['task']:<18} {t['tree_id'] or '':<8} ({t['x']:8.2f}, {t['y']:8.2f})" for t in targets]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_simulate(args) -> int:
    _, farm, profile, ex = _decoded(args)
    sensors = SensorOutcomeTable()
    if args.sensors:
        try:
            sensors = SensorOutcomeTable.from_json(_read(args.sensors))
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_IO, f"{args.sensors}: bad sensor table ({exc})") from None
    try:
        model = StochasticEdgeModel(args.variance)
    except ValueError as exc:
        raise CliError(EXIT_IO, f"--variance: {exc}") from None
    trace = execute(ex, farm, model, sensors, args.seed, speed=profile.speed)
    if args.out:
        _write(args.out, trace.to_jsonl())
    s = trace.summary()
    text = f"outcome: {s['outcome']}\ntotal cost: {s['total_cost_m']:.2f} m of {s['budget_m']:.2f} m\nR: {s['R']}"
    _emit(args, s, text)
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        cfg = bench_mod.load_bench_config(args.config) if args.config else bench_mod.BenchConfig()
        over = {}
        if args.sizes:
            over["sizes"] = tuple(int(s) for s in args.sizes.split(","))
        if args.solvers:
            over["solvers"] = tuple(s.strip() for s in args.solvers.split(","))
        for key in ("budget", "variance", "trials", "seed"):
            if getattr(args, key) is not None:
                over[key] = getattr(args, key)
        cfg = replace(cfg, **over)
    except SOPError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    table = bench_mod.run_benchmark(cfg)
    out = table.to_json(args.timings) if args.json else table.to_text()
    if args.out:
        _write(args.out, out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.plan:
        plan = _plan(args, _schema(args))
        st = plan_stats(plan)
        _emit(args, {"plan": plan.name, "tasks": st.task_count, "conditionals": st.conditional_count},
              f"{plan.name}: {st.task_count} tasks ({st.conditional_count} conditionals)")
        return EXIT_OK
    farm = _farm(args)
    payload: dict = {"trees": len(farm.trees), "scale_m": farm_scale(farm)}
    lines = [f"trees: {len(farm.trees)}", f"scale: {farm_scale(farm):.1f} m"]
    if args.half:
        ids = sorted(trees_in_half(farm, args.half))
        payload["half"] = {"direction": args.half, "trees": ids}
        lines.append(f"{args.half} half: {' '.join(ids)}")
    if args.corners:
        corners = boundary_corners(farm)
        payload["corners"] = {k: {"lat": c.lat, "lon": c.lon} for k, c in zip(("NW", "NE", "SE", "SW"), corners)}
        lines += [f"{k}: {c.lat:.7f}, {c.lon:.7f}" for k, c in zip(("NW", "NE", "SE", "SW"), corners)]
    if args.nearest:
        try:
            lat, lon = (float(v) for v in args.nearest.split(","))
        except ValueError:
            raise CliError(EXIT_IO, "--nearest expects LAT,LON") from None
        ids = nearest_trees(farm, GeoPoint(lat, lon), args.k)
        payload["nearest"] = ids
        lines.append(f"nearest {args.k}: {' '.join(ids)}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    farm = argparse.ArgumentParser(add_help=False)
    farm.add_argument("--farm", default=str(data_path("orchard.geojson")), help="farm GeoJSON file")
    schema = argparse.ArgumentParser(add_help=False)
    schema.add_argument("--schema", default=str(data_path("mission_l1.xsd")), help="L1 XSD file")
    robot = argparse.ArgumentParser(add_help=False)
    robot.add_argument("--robot", default=str(data_path("robot.ini")), help="robot profile INI")
    robot.add_argument("--budget", type=float, help="override the robot's distance budget (normalized units)")

    p = argparse.ArgumentParser(prog="orchardplan", description="Mission planning for orchard robots.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", parents=[common, farm, schema], help="natural language to a validated L1 plan")
    sp.add_argument("query", nargs="?", help="mission text (read from stdin when omitted)")
    sp.add_argument("--backend", choices=("mock", "live", "replay"), default="mock")
    sp.add_argument("--config", default=str(data_path("backend.ini")), help="backend INI")
    sp.add_argument("--robot", default=str(data_path("robot.ini")), help="robot profile INI")
    sp.add_argument("--max-repairs", type=int, default=1)
    sp.add_argument("--record", action="store_true", help="replay backend: fetch and store misses")
    sp.add_argument("--out", help="write the plan XML here")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("validate", parents=[common, schema], help="check a plan against the schema")
    sp.add_argument("plan")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("decode", parents=[common, farm, schema, robot], help="bind a plan to robot and farm")
    sp.add_argument("plan")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("simulate", parents=[common, farm, schema, robot], help="run a plan with random travel costs")
    sp.add_argument("plan")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--variance", type=float, default=0.0)
    sp.add_argument("--sensors", help="sensor outcome table (JSON)")
    sp.add_argument("--out", help="write the JSONL trace here")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bench", parents=[common], help="orienteering benchmark tables")
    sp.add_argument("--config", help="bench INI (defaults built in)")
    sp.add_argument("--sizes", help="comma-separated node counts")
    sp.add_argument("--solvers", help="comma-separated: greedy_offline, online, exact")
    sp.add_argument("--budget", type=float)
    sp.add_argument("--variance", type=float)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--timings", action="store_true", help="include wall times in JSON")
    sp.add_argument("--out", help="write the table here")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", parents=[common, farm, schema], help="plan stats or farm queries")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--half", choices=DIRECTIONS)
    sp.add_argument("--corners", action="store_true")
    sp.add_argument("--nearest", metavar="LAT,LON")
    sp.add_argument("-k", type=int, default=3)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"orchardplan {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except PlanParseError as exc:
        print(f"orchardplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
