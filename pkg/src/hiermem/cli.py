"""Unified command-line front end composing the modules into experiments.

Subcommands: footprint, pagemem-demo, trace, schedule, simulate, lockfree,
pipeline, plot. Configs and reports are JSON (reports carry a
schema_version); timelines and curves are CSV. Exit codes: 0 ok, 1 usage,
2 infeasible schedule, 3 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import footprint as fp
from . import lockfree as lf
from . import pagemem as pm
from . import presets
from .errors import ConfigError, InfeasibleScheduleError
from .scheduler import LayerModel, Schedule, ShardingModel, peak_memory, schedule
from .simengine import HardwareProfile, compare, simulate
from .tracer import TensorTrace, TimingModel, build_trace

SCHEMA_VERSION = "1"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _load_json(path: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad JSON in {path}: {exc}") from None


def _dump_json(data, out: str | None):
    text = json.dumps(data, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _timing_from_file(path: str | None, profile: HardwareProfile | None = None) -> TimingModel:
    if path:
        raw = _load_json(path)
        if "table" in raw:
            raw["table"] = {k: tuple(v) for k, v in raw["table"].items()}
        return TimingModel.from_dict(raw)
    if profile is not None:
        return TimingModel(gpu_sec_per_byte=1.0 / profile.gpu_bytes_per_s,
                           cpu_sec_per_byte=1.0 / profile.cpu_bytes_per_s)
    return TimingModel()


def _resolve_config(args) -> fp.TransformerConfig:
    if getattr(args, "preset", None):
        return presets.model_preset(args.preset)
    if getattr(args, "config", None):
        return presets.resolve_model(_load_json(args.config))
    raise UsageError("provide --config FILE or --preset NAME")


# -- footprint ----------------------------------------------------------------

_UNITS = {"B": 1, "MiB": fp.MIB, "GiB": fp.GIB}


def cmd_footprint(args) -> int:
    cfg = _resolve_config(args)
    unit = _UNITS[args.unit]

    def conv(nbytes: int):
        return nbytes if unit == 1 else nbytes / unit

    layer = fp.layer_footprint(cfg, exact=args.exact)
    model = fp.model_footprint(cfg, exact=args.exact)
    rows = [
        {"block": r.block, "layer": r.layer_name,
         "params": conv(r.params_bytes), "acts": conv(r.acts_bytes),
         "optims": conv(r.optims_bytes)}
        for r in layer.rows
    ]
    totals = {
        "per_layer": {"params": conv(layer.params_bytes), "acts": conv(layer.acts_bytes),
                      "optims": conv(layer.optims_bytes)},
        "model": {k.replace("_bytes", ""): conv(v) for k, v in model.items()},
    }
    if args.format == "json":
        _dump_json({"schema_version": SCHEMA_VERSION, "unit": args.unit,
                    "exact": args.exact, "num_layers": cfg.num_layers,
                    "rows": rows, "totals": totals}, args.out)
    elif args.format == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerow(["block", "layer", f"params_{args.unit}",
                         f"acts_{args.unit}", f"optims_{args.unit}"])
        for r in rows:
            writer.writerow([r["block"], r["layer"], r["params"], r["acts"], r["optims"]])
        writer.writerow(["total", "per_layer", totals["per_layer"]["params"],
                         totals["per_layer"]["acts"], totals["per_layer"]["optims"]])
        writer.writerow(["total", f"model_x{cfg.num_layers}", totals["model"]["params"],
                         totals["model"]["acts"], totals["model"]["optims"]])
    else:
        width = 24

        def fmt(v):
            return str(v) if isinstance(v, int) else f"{v:.6g}"

        print(f"{'block':<10}{'layer':<{width}}{'params':>16}{'acts':>16}{'optims':>16}  [{args.unit}]")
        for r in rows:
            print(f"{r['block']:<10}{r['layer']:<{width}}{fmt(r['params']):>16}{fmt(r['acts']):>16}{fmt(r['optims']):>16}")
        t = totals["per_layer"]
        print(f"{'total':<10}{'per layer':<{width}}{fmt(t['params']):>16}{fmt(t['acts']):>16}{fmt(t['optims']):>16}")
        t = totals["model"]
        print(f"{'total':<10}{f'model ({cfg.num_layers} layers)':<{width}}{fmt(t['params']):>16}{fmt(t['acts']):>16}{fmt(t['optims']):>16}")
    return EXIT_OK


# -- pagemem demo ---------------------------------------------------------------

def cmd_pagemem_demo(args) -> int:
    pool_spec = _load_json(args.pool_spec)
    ops = _load_json(args.ops)
    manager = pm.PageManager([
        (p["tier"], p["capacity_bytes"], p.get("page_bytes", pm.PAGE_BYTES_DEFAULT))
        for p in pool_spec["pools"]
    ])
    name_to_id: dict[str, int] = {}
    log = []
    for op in ops:
        kind = op["op"]
        if kind == "allocate":
            spec = fp.TensorSpec(op["name"], op.get("kind", "param16"),
                                 op["bytes"], op.get("layer_index", 0))
            tensor = manager.allocate(spec, op["tier"])
            name_to_id[op["name"]] = tensor.tensor_id
            log.append({"op": "allocate", "name": op["name"],
                        "tensor_id": tensor.tensor_id, "pages": tensor.page_list})
        elif kind == "release":
            freed = manager.release(name_to_id[op["name"]])
            log.append({"op": "release", "name": op["name"], "freed_bytes": freed})
        elif kind == "move":
            desc = manager.page_move(op["page_id"], op["target"])
            log.append({"op": "move", "page_id": op["page_id"],
                        "bytes": desc.bytes, "src": desc.src_tier.name,
                        "dst": desc.dst_tier.name, "new_page_id": desc.new_page_id})
        elif kind == "merge":
            log.append(manager.tensor_merge(name_to_id[op["name"]]))
        else:
            raise UsageError(f"unknown op {kind!r} in ops script")
    _dump_json({"schema_version": SCHEMA_VERSION, "log": log,
                "state": manager.state_dict()}, args.out)
    return EXIT_OK


# -- trace ------------------------------------------------------------------------

def cmd_trace(args) -> int:
    cfg = _resolve_config(args)
    inventory = fp.tensor_inventory(cfg, args.granularity)
    timing = _timing_from_file(args.timing)
    traces = build_trace(inventory, timing, recompute_policy=args.recompute)
    _dump_json([t.__dict__ for t in traces], args.out)
    return EXIT_OK


def _traces_from_file(path: str) -> list[TensorTrace]:
    return [TensorTrace(**t) for t in _load_json(path)]


# -- schedule ----------------------------------------------------------------------

def cmd_schedule(args) -> int:
    cfg = _resolve_config(args)
    inventory = fp.tensor_inventory(cfg, args.granularity)
    traces = _traces_from_file(args.traces) if args.traces else \
        build_trace(inventory, _timing_from_file(args.timing))
    model = LayerModel.from_inventory(inventory, args.page_bytes, cfg.batch_size)
    sharding = ShardingModel(args.world_size, args.rank)
    sched = schedule(model, traces, args.gpu_budget, sharding,
                     phase1_only=args.phase1_only)
    out = sched.to_dict()
    out["schema_version"] = SCHEMA_VERSION
    out["peak_bytes"] = peak_memory(sched, traces)
    _dump_json(out, args.out)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sched = Schedule.from_dict(_load_json(args.schedule))
    traces = _traces_from_file(args.traces)
    profile = presets.resolve_hardware(
        args.profile if args.profile.startswith("preset:") else _load_json(args.profile)
    )
    report = simulate(sched, traces, profile, iterations=args.iterations,
                      update_mode=args.update_mode, optimizer_tier=args.optimizer_tier)
    data = report.to_dict()
    data["schema_version"] = SCHEMA_VERSION
    if args.timeline:
        with open(args.timeline, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task_id", "operation", "resource", "start_s", "end_s"])
            for e in report.timeline:
                writer.writerow([e.task_id, e.operation, e.resource, e.start_s, e.end_s])
    _dump_json(data, args.out)
    return EXIT_OK


# -- lockfree ----------------------------------------------------------------------

def _delays_from_arg(arg: str) -> lf.DelayModel:
    if arg.startswith("preset:"):
        return lf.DelayModel.preset(arg.removeprefix("preset:"))
    raw = _load_json(arg)
    return lf.DelayModel(**raw)


def cmd_lockfree(args) -> int:
    raw = _load_json(args.toy_config) if args.toy_config else {}
    raw.setdefault("seed", args.seed)
    if args.seed is not None:
        raw["seed"] = args.seed
    hyper = lf.AdamHyper(**raw.pop("hyper")) if "hyper" in raw else lf.AdamHyper()
    cfg = lf.ToyTrainConfig(hyper=hyper, **raw)
    delays = _delays_from_arg(args.delays)
    if args.mode == "sync":
        report = lf.run_sync(cfg, delays, args.iters)
    else:
        report = lf.run_lockfree(cfg, delays, args.iters,
                                 max_inflight=args.max_inflight)
    data = report.to_dict()
    data["schema_version"] = SCHEMA_VERSION
    _dump_json(data, args.out)
    return EXIT_OK


# -- pipeline ----------------------------------------------------------------------

def run_pipeline(config: dict) -> dict:
    """footprint -> inventory -> trace -> schedule (both phases) -> simulate (both)."""
    cfg = presets.resolve_model(config["model"])
    profile = presets.resolve_hardware(config.get("hardware", "preset:a100-server"))
    gpu_budget = config["gpu_budget_bytes"]
    page_bytes = config.get("page_bytes", pm.PAGE_BYTES_DEFAULT)
    recompute = config.get("recompute", False)
    granularity = config.get("granularity", "per_table_row")
    world_size = config.get("world_size", profile.num_gpus)
    rank = config.get("rank", 0)
    iterations = config.get("iterations", 1)
    update_mode = config.get("update_mode", "none")
    optimizer_tier = config.get("optimizer_tier", "ssd")
    seed = config.get("seed", 0)
    phase_selection = config.get("phase", "phase2")

    model_fp = fp.model_footprint(cfg)
    inventory = fp.tensor_inventory(cfg, granularity)
    timing = TimingModel(gpu_sec_per_byte=1.0 / profile.gpu_bytes_per_s,
                         cpu_sec_per_byte=1.0 / profile.cpu_bytes_per_s)
    traces = build_trace(inventory, timing, recompute_policy=recompute)
    model = LayerModel.from_inventory(inventory, page_bytes, cfg.batch_size)
    sharding = ShardingModel(world_size, rank)

    phase1 = schedule(model, traces, gpu_budget, sharding, phase1_only=True)
    phase2 = schedule(model, traces, gpu_budget, sharding)
    sim1 = simulate(phase1, traces, profile, iterations=iterations,
                    update_mode=update_mode, optimizer_tier=optimizer_tier)
    sim2 = simulate(phase2, traces, profile, iterations=iterations,
                    update_mode=update_mode, optimizer_tier=optimizer_tier)
    chosen = phase2 if phase_selection == "phase2" else phase1

    report = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "model": cfg.__dict__,
            "hardware": profile.to_dict(),
            "gpu_budget_bytes": gpu_budget,
            "page_bytes": page_bytes,
            "recompute": recompute,
            "granularity": granularity,
            "world_size": world_size,
            "rank": rank,
            "iterations": iterations,
            "update_mode": update_mode,
            "optimizer_tier": optimizer_tier,
            "phase": phase_selection,
            "seed": seed,
        },
        "footprint": {
            "per_layer": {
                "params_bytes": fp.layer_footprint(cfg).params_bytes,
                "acts_bytes": fp.layer_footprint(cfg).acts_bytes,
                "optims_bytes": fp.layer_footprint(cfg).optims_bytes,
            },
            "model": model_fp,
            "model_gib": {k: v / fp.GIB for k, v in model_fp.items()},
            "param_count": fp.param_count(cfg),
        },
        "schedule": {
            "phase1": {"num_tasks": len(phase1.tasks),
                       "peak_bytes": peak_memory(phase1, traces)},
            "phase2": {"num_tasks": len(phase2.tasks),
                       "peak_bytes": peak_memory(phase2, traces)},
            "selected_phase": chosen.phase,
        },
        "simulation": {
            "phase1": sim1.to_dict(),
            "phase2": sim2.to_dict(),
            "phase1_vs_phase2": compare(sim1, sim2),
        },
    }
    return report


def cmd_pipeline(args) -> int:
    if args.preset:
        config = {"model": f"preset:{args.preset}",
                  "gpu_budget_bytes": args.gpu_budget or 16 * fp.GIB}
    else:
        config = _load_json(args.config)
        if args.gpu_budget:
            config["gpu_budget_bytes"] = args.gpu_budget
    report = run_pipeline(config)
    _dump_json(report, args.out)
    return EXIT_OK


# -- plot --------------------------------------------------------------------------

def cmd_plot(args) -> int:
    report = _load_json(args.report)
    rows: list[list] = []
    if args.kind == "timeline":
        timeline = report.get("timeline")
        if timeline is None:
            sim = report.get("simulation", {}).get(args.section)
            timeline = sim.get("timeline") if sim else None
        if timeline is None:
            raise UsageError("report has no timeline section")
        rows.append(["task_id", "operation", "resource", "start_s", "end_s"])
        for e in timeline:
            rows.append([e["task_id"], e["operation"], e["resource"],
                         e["start_s"], e["end_s"]])
    elif args.kind == "loss":
        curve = report.get("loss_curve")
        if curve is None:
            raise UsageError("report has no loss_curve section")
        rows.append(["iteration", "loss"])
        rows += [[i, v] for i, v in enumerate(curve)]
    elif args.kind == "utilization":
        util = report.get("utilization")
        busy = report.get("busy_s", {})
        if util is None:
            sim = report.get("simulation", {}).get(args.section)
            if sim:
                util, busy = sim.get("utilization"), sim.get("busy_s", {})
        if util is None:
            raise UsageError("report has no utilization section")
        rows.append(["resource", "busy_s", "utilization"])
        rows += [[r, busy.get(r, 0.0), u] for r, u in sorted(util.items())]
    else:
        raise UsageError(f"unknown plot kind {args.kind!r}")

    out = args.out or "-"
    if out == "-":
        writer = csv.writer(sys.stdout)
        writer.writerows(rows)
    else:
        with open(out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="hiermem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("footprint", help="closed-form layer/model byte footprints")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--exact", action="store_true")
    p.add_argument("--format", choices=["json", "csv", "table"], default="table")
    p.add_argument("--unit", choices=list(_UNITS), default="B")
    p.add_argument("--out")
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser("pagemem-demo", help="replay an allocator op script")
    p.add_argument("--pool-spec", required=True)
    p.add_argument("--ops", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pagemem_demo)

    p = sub.add_parser("trace", help="emit tensor lifetime traces")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--timing")
    p.add_argument("--recompute", action="store_true")
    p.add_argument("--granularity", choices=["per_table_row", "per_logical_tensor"],
                   default="per_table_row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("schedule", help="emit the two-phase page task schedule")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--traces")
    p.add_argument("--timing")
    p.add_argument("--gpu-budget", type=int, required=True)
    p.add_argument("--page-bytes", type=int, default=pm.PAGE_BYTES_DEFAULT)
    p.add_argument("--world-size", type=int, default=1)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--granularity", choices=["per_table_row", "per_logical_tensor"],
                   default="per_table_row")
    p.add_argument("--phase1-only", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="discrete-event replay of a schedule")
    p.add_argument("--schedule", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--profile", default="preset:a100-server")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--update-mode", choices=["none", "sync"], default="none")
    p.add_argument("--optimizer-tier", choices=["ssd", "cpu"], default="ssd")
    p.add_argument("--out")
    p.add_argument("--timeline")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lockfree", help="toy trainer with the lock-free protocol")
    p.add_argument("--toy-config")
    p.add_argument("--delays", default="preset:ssd")
    p.add_argument("--mode", choices=["sync", "lockfree"], default="lockfree")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-inflight", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lockfree)

    p = sub.add_parser("pipeline", help="footprint -> trace -> schedule -> simulate")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--gpu-budget", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("plot", help="emit CSV series from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--kind", required=True, choices=["timeline", "loss", "utilization"])
    p.add_argument("--section", choices=["phase1", "phase2"], default="phase2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleScheduleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # internal
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
