"""Command-line interface: ``gdalloc <command> ...``.

Exit codes: 0 success, 1 infeasibility or solver failure (including a
non-zero trim with ``--fail-on-trim``, or a failed ``validate``), 2 input
errors.  Result directories are staged and only published on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import goal, io
from .errors import GdallocError, InfeasibleError, NonConvergenceError, StructuralError
from .generator import GeneratorConfig, generate_instance
from .linear import allocation_flow
from .metrics import MetricsRow, emit_frontier, frontier_summary, normalize, pareto_mask
from .model import Allocation, build_graph, validate_allocation

log = logging.getLogger("gdalloc")

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad command line or input file (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


GLOBAL_DEFAULTS = {"seed": 0, "tol": 1e-10, "threads": 1, "fail_on_trim": False, "config": None,
                   "dump_flow": None, "verbose": False}


def _global_flags(parser, suppress):
    d = (lambda k: argparse.SUPPRESS) if suppress else (lambda k: GLOBAL_DEFAULTS[k])
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d("seed"), help="random seed (generate; recorded in manifests)")
    g.add_argument("--tol", type=float, default=d("tol"), help="quadratic-stage KKT tolerance")
    g.add_argument("--threads", type=int, default=d("threads"), help="worker threads for sweeps")
    g.add_argument("--fail-on-trim", action="store_true", default=d("fail_on_trim"),
                   help="exit 1 when demands had to be trimmed")
    g.add_argument("--config", default=d("config"), help="JSON file with option overrides")
    g.add_argument("--dump-flow", default=d("dump_flow"), help="write the first linear stage as an arc list")
    g.add_argument("-v", "--verbose", action="store_true", default=d("verbose"))


def _knob_flags(p, grid=False):
    kind = str if grid else float
    p.add_argument("--mode", choices=goal.MODES, default=None)
    p.add_argument("--objective", choices=goal.OBJECTIVES, default=None, help="objective for --mode single")
    for k in goal.KNOBS:
        p.add_argument(f"--{k}", type=kind, default=None,
                       help="value or grid a:b:n[:log]" if grid else None)
    p.add_argument("--order", choices=goal.ORDERS, default=None, help="three-step stage order")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdalloc", description="Guaranteed-delivery inventory allocation.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic instance")
    p.add_argument("--out", required=True)
    p.add_argument("--num-supply", type=int)
    p.add_argument("--num-campaigns", type=int)
    p.add_argument("--demand-scale", type=float)
    p.add_argument("--targeting-density", type=float)
    p.add_argument("--logistic-sign", choices=("conventional", "as-printed"))

    p = sub.add_parser("solve", parents=[common], help="solve one configuration")
    p.add_argument("instance")
    p.add_argument("--out", required=True)
    _knob_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="solve a knob grid")
    p.add_argument("instance")
    p.add_argument("--out", required=True)
    _knob_flags(p, grid=True)

    p = sub.add_parser("report", parents=[common], help="tables and frontier files from results")
    p.add_argument("results", nargs="+", help="solve or sweep result directories")
    p.add_argument("--baseline", help="baseline solve directory (default: a baseline among the inputs)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-duals", parents=[common], help="write alpha/beta/rho of a result")
    p.add_argument("result", help="solve directory or sweep point file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", parents=[common], help="check an instance or an allocation")
    p.add_argument("instance")
    p.add_argument("--allocation", help="allocation file (or result directory) to check")
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = io.read_json(args.config)
        except OSError as exc:
            raise InputError(f"--config: {exc}") from exc
        except StructuralError as exc:
            raise InputError(str(exc)) from exc
        if not isinstance(cfg, dict):
            raise InputError("--config: expected a JSON object")
        if args.command == "generate":
            args.generator = cfg
        else:
            known = set(vars(args))
            bad = sorted(set(k.replace("-", "_") for k in cfg) - known)
            if bad:
                raise InputError(f"--config: unknown option(s): {', '.join(bad)}")
            # explicit command-line flags win over the file
            for k, v in cfg.items():
                k = k.replace("-", "_")
                if getattr(args, k) in (None, GLOBAL_DEFAULTS.get(k)):
                    setattr(args, k, v)
    return args


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_generate(args):
    data = dict(getattr(args, "generator", {}))
    for k in ("num_supply", "num_campaigns", "demand_scale", "targeting_density", "logistic_sign"):
        v = getattr(args, k)
        if v is not None:
            data[k] = v
    if args.seed is not None and ("seed" not in data or args.seed != GLOBAL_DEFAULTS["seed"]):
        data["seed"] = args.seed
    try:
        cfg = GeneratorConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"generator config: {exc}") from exc
    supplies, campaigns, edges, meta = generate_instance(cfg)
    io.write_instance(args.out, supplies, campaigns, edges, meta)
    print(f"wrote {args.out}: {len(supplies)} supplies, {len(campaigns)} campaigns, {len(edges)} edges")
    return EXIT_OK


def _load_graph(path):
    try:
        return io.load_graph(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc


def _knob_config(args, grid=False):
    fields = {"mode": args.mode or "baseline"}
    if args.objective is not None:
        fields["objective"] = args.objective
    if args.order is not None:
        fields["order"] = args.order
    axes = {}
    # eta leads so two-knob sweeps group into iso-eta contours
    for k in sorted(goal.KNOBS, key=lambda k: k != "eta"):
        v = getattr(args, k)
        if v is None:
            continue
        if grid:
            try:
                values = goal.parse_grid(str(v))
            except ValueError as exc:
                raise InputError(f"--{k}: {exc}") from exc
            if len(values) > 1 or ":" in str(v):
                axes[k] = values
            fields[k] = float(values[0])
        else:
            fields[k] = float(v)
    try:
        config = goal.KnobConfig(**fields)
        for k, vals in axes.items():
            for x in vals:
                replace(config, **{k: float(x)})
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return config, axes


def _check_trim(args, ctx):
    if args.fail_on_trim and ctx.trim.total_penalty > 0:
        raise InfeasibleError(
            f"demands trimmed (total penalty {ctx.trim.total_penalty:g}); refusing because of --fail-on-trim"
        )


def _dump_flow(args, ctx, config):
    if not args.dump_flow:
        return
    xi = config.xi_value
    first = {"two-step-a": "xiF2+F3", "two-step-b": "F2", "two-step-c": "F3"}.get(config.mode)
    if config.mode == "three-step":
        first = "F3" if config.order == "F3-first" else "F2"
    if config.mode == "single":
        first = {"NGD": "F3", "Click": "F2", "NGD+Click": "xiF2+F3", "weighted": "xiF2+F3"}.get(config.objective)
    yp, zp = ctx.profit(first or "zero", xi)
    io.atomic_write(args.dump_flow, allocation_flow(ctx.graph, yp, zp).to_text())


def _cmd_solve(args):
    config, _ = _knob_config(args)
    graph = _load_graph(args.instance)
    ctx = goal.Context(graph, qp_tol=args.tol)
    _check_trim(args, ctx)
    _dump_flow(args, ctx, config)
    result = goal.run(ctx, config)
    man = io.manifest(config.as_dict(), args.instance, seed=args.seed, extra={"tol": args.tol})
    with io.ResultDir(args.out) as tmp:
        io.write_result(tmp, result, man)
    f1, f2, f3 = result.metrics
    print(f"{result.label}: F1={f1:.6g} F2={f2:.6g} F3={f3:.6g} -> {args.out}")
    return EXIT_OK


def _cmd_sweep(args):
    config, axes = _knob_config(args, grid=True)
    if not axes:
        axes = {}
    grid = goal.knob_grid(**axes) if axes else [{}]
    graph = _load_graph(args.instance)
    ctx = goal.Context(graph, qp_tol=args.tol)
    _check_trim(args, ctx)
    _dump_flow(args, ctx, config)
    results = goal.sweep(ctx, config, grid, threads=args.threads)
    baseline = goal.run(ctx, goal.KnobConfig("baseline"))
    names = list(axes)
    rows = [r.row for r in results]
    man = io.manifest(config.as_dict(), args.instance, seed=args.seed,
                      extra={"tol": args.tol, "grid": {k: list(v) for k, v in axes.items()}, "points": len(grid)})
    with io.ResultDir(args.out) as tmp:
        for k, r in enumerate(results):
            io.write_json(Path(tmp) / "points" / f"{k:04d}.json", io.result_to_dict(r))
        io.write_json(Path(tmp) / "baseline.json", io.result_to_dict(baseline))
        io.atomic_write(Path(tmp) / "frontier.csv", emit_frontier(rows, baseline.row, names))
        io.write_json(Path(tmp) / "summary.json", frontier_summary(rows, _frontier_axes(config)))
        io.write_json(Path(tmp) / "manifest.json", man)
    print(f"{len(results)} results -> {args.out}")
    return EXIT_OK


def _frontier_axes(config):
    if config.mode == "three-step":
        return ("click", "gd")
    if config.mode == "two-step-c":
        return ("ngd_click", "gd") if config.xi_value > 0 else ("ngd", "gd")
    if config.mode == "two-step-b":
        return ("click", "gd")
    return ("ngd_click", "gd")


def _row_from_metrics(m) -> MetricsRow:
    return MetricsRow(m.get("label", ""), m["ngd"], m["click"], m["gd"], m.get("click_only"), m.get("knobs", {}))


def _read_metrics(path: Path):
    """Metrics rows of a solve directory or of every point of a sweep directory."""
    if (path / "metrics.json").exists():
        return [_row_from_metrics(io.read_json(path / "metrics.json"))], None
    if (path / "points").is_dir():
        rows = []
        for f in sorted((path / "points").glob("*.json")):
            d = io.read_json(f)
            m = dict(d["metrics"], label=d["label"], knobs={k: v for k, v in d["config"].items()
                                                             if k in goal.KNOBS and v is not None})
            rows.append(_row_from_metrics(m))
        base = None
        if (path / "baseline.json").exists():
            b = io.read_json(path / "baseline.json")
            base = _row_from_metrics(dict(b["metrics"], label="baseline"))
        return rows, base
    raise InputError(f"{path}: not a result directory")


def _cmd_report(args):
    rows, baseline = [], None
    sweep_axes = None
    for r in args.results:
        p = Path(r)
        try:
            got, base = _read_metrics(p)
        except (OSError, KeyError) as exc:
            raise InputError(f"{p}: unreadable result ({exc})") from exc
        rows.extend(got)
        baseline = baseline or base
        if (p / "manifest.json").exists():
            grid = io.read_json(p / "manifest.json").get("grid")
            if grid:
                sweep_axes = list(grid)
    if args.baseline:
        rows_b, _ = _read_metrics(Path(args.baseline))
        baseline = rows_b[0]
    if baseline is None:
        found = [r for r in rows if r.label == "baseline"]
        baseline = found[0] if found else None
    out = Path(args.out)
    with io.ResultDir(out) as tmp:
        table = ["label,ngd,click,ngd_click,gd,norm_ngd,norm_click,norm_ngd_click,norm_gd"]
        norm = normalize(rows, baseline) if baseline is not None else [None] * len(rows)
        for r, n in zip(rows, norm):
            nv = n.values() if n is not None else (float("nan"),) * 4
            table.append(",".join([r.label] + [repr(float(v)) for v in (*r.values(), *nv)]))
        io.atomic_write(Path(tmp) / "table.csv", "\n".join(table) + "\n")
        if sweep_axes:
            # only sweep points carry every axis; single solves stay in table.csv
            swept = [r for r in rows if all(k in r.knobs for k in sweep_axes)]
            io.atomic_write(Path(tmp) / "frontier.csv", emit_frontier(swept, baseline, sweep_axes))
        pts = [(r.ngd_click, r.gd) for r in rows]
        summary = frontier_summary(rows)
        summary["baseline"] = baseline.label if baseline is not None else None
        summary["non_dominated_labels"] = [r.label for r, k in zip(rows, pareto_mask(pts)) if k] if pts else []
        io.write_json(Path(tmp) / "summary.json", summary)
    print("\n".join(table))
    return EXIT_OK


def _cmd_export_duals(args):
    p = Path(args.result)
    try:
        if p.is_dir():
            duals = io.read_json(p / "duals.json")
        else:
            duals = io.read_json(p)["duals"]
    except (OSError, KeyError, TypeError) as exc:
        raise InputError(f"{p}: no duals found ({exc})") from exc
    for key in ("alpha", "beta", "rho"):
        if not isinstance(duals.get(key), dict):
            raise InputError(f"{p}: duals lack '{key}'")
    io.write_json(args.out, {k: duals[k] for k in ("alpha", "beta", "rho")})
    print(f"duals -> {args.out}")
    return EXIT_OK


def _cmd_validate(args):
    graph = _load_graph(args.instance)
    if not args.allocation:
        ctx = goal.Context(graph)
        report = {
            "supplies": graph.num_supply,
            "campaigns": graph.num_campaigns,
            "edges": graph.num_edges,
            "flagged_campaigns": list(graph.flagged_campaigns),
            "feasibility": ctx.trim.as_dict(),
        }
        print(io.dumps(report), end="")
        if args.fail_on_trim and ctx.trim.total_penalty > 0:
            return EXIT_INFEASIBLE
        return EXIT_OK
    path = Path(args.allocation)
    try:
        data = io.read_json(path / "allocation.json" if path.is_dir() else path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    if isinstance(data, dict) and "allocation" in data:
        data = data["allocation"]
    alloc = Allocation.from_records(graph, data)
    tol = args.tol if args.tol != GLOBAL_DEFAULTS["tol"] else 1e-6
    rep = validate_allocation(graph, alloc, tol)
    print(io.dumps(rep.as_dict()), end="")
    return EXIT_OK if rep.passed else EXIT_INFEASIBLE


COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "export-duals": _cmd_export_duals,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StructuralError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InfeasibleError, NonConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except GdallocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
