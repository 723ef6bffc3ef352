"""Command-line interface.

Exit status: 0 success, 2 input error, 3 no feasible plan.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

from .interference import InterferenceParams, fit_params, pred_intf_scalar, read_observations, relative_loss
from .intertuner import InfeasiblePlan, PlanStage, TrainingPlan, TuneStats, tune
from .intratuner import PRESETS, IntraSearchSpace, NoFeasibleConfig, SearchOptions, tune_intra
from .pipesim import PipelinePlan, closed_form_makespan, export_gantt, objective, simulate
from .stagecost import IterationContext, StageConfig, stage_cost
from .workload import ClusterSpec, ModelSpec, OpTimeTable, shape_key

log = logging.getLogger("pipeplan")

PLAN_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 2, 3


class InputError(Exception):
    pass


# -- spec files --------------------------------------------------------------


def _read_yaml(path) -> Any:
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: malformed YAML: {exc}") from exc


def _number(value, key: str, path) -> Any:
    # YAML 1.1 reads "80e9" as a string
    if isinstance(value, str):
        try:
            f = float(value)
        except ValueError:
            raise InputError(f"{path}: key {key!r} must be a number, got {value!r}") from None
        return int(f) if f.is_integer() and "." not in value and "e" not in value.lower() else f
    return value


def _build(cls, data, path, section: str):
    if not isinstance(data, Mapping):
        raise InputError(f"{path}: {section} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise InputError(f"{path}: unknown {section} key {k!r}")
    kw = {}
    for k, v in data.items():
        ftype = str(names[k].type)
        kw[k] = v if ("str" in ftype or "bool" in ftype) else _number(v, k, path)
    try:
        return cls(**kw)
    except TypeError as exc:
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.name not in data and f.default is dataclasses.MISSING]
        raise InputError(f"{path}: {section} is missing key(s) {missing}") from exc
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_model(path) -> ModelSpec:
    data = _read_yaml(path)
    if isinstance(data, Mapping) and "model" in data:
        data = data["model"]
    return _build(ModelSpec, data, path, "model")


def load_cluster(path, mem_headroom: Optional[float] = None) -> ClusterSpec:
    data = _read_yaml(path)
    if isinstance(data, Mapping) and "cluster" in data:
        data = data["cluster"]
    c = _build(ClusterSpec, data, path, "cluster")
    if mem_headroom is not None:
        try:
            c = dataclasses.replace(c, mem_headroom=mem_headroom)
        except ValueError as exc:
            raise InputError(f"--mem-headroom: {exc}") from exc
    return c


def load_interference(path) -> InterferenceParams:
    data = _read_yaml(path)
    if isinstance(data, Mapping) and "factors" in data:
        data = data["factors"]
    try:
        return InterferenceParams({k: [float(x) for x in v] for k, v in data.items()})
    except (ValueError, TypeError, AttributeError, KeyError) as exc:
        raise InputError(f"{path}: bad interference factors: {exc}") from exc


def load_op_times(path) -> OpTimeTable:
    """YAML list of ``{kind, shape: {...}, seconds}``."""
    data = _read_yaml(path) or []
    entries = {}
    try:
        for row in data:
            entries[(row["kind"], shape_key(**row["shape"]))] = float(row["seconds"])
        return OpTimeTable(entries)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad op-time entry: {exc}") from exc


def spec_hash(obj) -> str:
    blob = json.dumps(dataclasses.asdict(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- plan files --------------------------------------------------------------


def plan_document(
    plan: TrainingPlan,
    model: ModelSpec,
    cluster: ClusterSpec,
    params: InterferenceParams,
    options: Mapping[str, Any],
) -> dict:
    return {
        "version": PLAN_VERSION,
        "model_hash": spec_hash(model),
        "cluster_hash": spec_hash(cluster),
        "model": dataclasses.asdict(model),
        "cluster": dataclasses.asdict(cluster),
        "interference": params.to_dict(),
        "options": dict(options),
        "plan": {
            "G": plan.G,
            "S": plan.S,
            "B_global": plan.B_global,
            "objective": plan.objective,
            "throughput": plan.throughput,
            "stages": [
                {
                    "layers": s.layers,
                    "mesh": list(s.mesh),
                    "t": s.t,
                    "d": s.d,
                    "mem_peak": s.mem_peak,
                    "config": s.config.to_dict(),
                }
                for s in plan.stages
            ],
        },
    }


def write_plan(path, doc: Mapping) -> None:
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


@dataclasses.dataclass
class LoadedPlan:
    model: ModelSpec
    cluster: ClusterSpec
    params: InterferenceParams
    plan: TrainingPlan
    doc: dict


def load_plan(path) -> LoadedPlan:
    doc = _read_yaml(path)
    if not isinstance(doc, Mapping) or "version" not in doc:
        raise InputError(f"{path}: not a plan file (no version field)")
    if doc["version"] != PLAN_VERSION:
        raise InputError(f"{path}: unsupported plan version {doc['version']!r}, expected {PLAN_VERSION}")
    try:
        model = ModelSpec(**doc["model"])
        cluster = ClusterSpec(**doc["cluster"])
        params = InterferenceParams(doc["interference"])
        p = doc["plan"]
        stages = tuple(
            PlanStage(s["layers"], tuple(s["mesh"]), StageConfig.from_dict(s["config"]), s["t"], s["d"], s["mem_peak"])
            for s in p["stages"]
        )
        plan = TrainingPlan(p["G"], p["S"], p["B_global"], stages, p["objective"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed plan: {exc}") from exc
    if spec_hash(model) != doc.get("model_hash") or spec_hash(cluster) != doc.get("cluster_hash"):
        raise InputError(f"{path}: embedded spec does not match its hash")
    return LoadedPlan(model, cluster, params, plan, dict(doc))


# -- reporting ---------------------------------------------------------------


def _fmt_cfg(c: StageConfig) -> str:
    return (f"b={c.micro_batch} dp={c.dp} tp={c.tp} zero={c.zero} ckpt={c.ckpt} "
            f"wo={c.wo:g} go={c.go:g} oo={c.oo:g} ao={c.ao:g}")


def print_plan(plan: TrainingPlan, out=None) -> None:
    out = out or sys.stdout
    print(f"objective {plan.objective!r} s/iter  throughput {plan.throughput!r} samples/s  "
          f"G={plan.G} S={plan.S}", file=out)
    print(f"{'stage':>5} {'layers':>6} {'mesh':>5} {'t':>12} {'d':>12} {'mem_GB':>8}  config", file=out)
    for i, s in enumerate(plan.stages, start=1):
        print(f"{i:>5} {s.layers:>6} {s.mesh[0]}x{s.mesh[1]:<3} {s.t:>12.6g} {s.d:>12.6g} "
              f"{s.mem_peak / 1e9:>8.3f}  {_fmt_cfg(s.config)}", file=out)


# -- commands ----------------------------------------------------------------


def _options(args, preset: str) -> SearchOptions:
    try:
        return SearchOptions.preset(
            preset,
            grid_step=args.grid_step,
            frontier_cap=None if args.frontier_cap == 0 else args.frontier_cap,
            tp_within_node=not args.tp_across_nodes,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _params(args) -> InterferenceParams:
    return load_interference(args.interference) if args.interference else InterferenceParams.default()


def cmd_tune(args) -> int:
    model = load_model(args.model)
    cluster = load_cluster(args.cluster, args.mem_headroom)
    params = _params(args)
    table = load_op_times(args.op_times) if args.op_times else None
    if args.global_batch < 1:
        raise InputError("--global-batch must be positive")
    presets = PRESETS if args.preset == "all" else (args.preset,)
    if args.preset == "all" and args.out and "{preset}" not in args.out:
        raise InputError("--preset all needs an --out path containing '{preset}'")
    G_values = None
    if args.grad_accum:
        G_values = args.grad_accum
        for G in G_values:
            if G < 1 or args.global_batch % G:
                raise InputError(f"--grad-accum {G} does not divide --global-batch {args.global_batch}")
    status = EXIT_OK
    for preset in presets:
        opts = _options(args, preset)
        stats = TuneStats()
        try:
            plan = tune(model, cluster, args.global_batch, opts, params, table,
                        G_values=G_values, max_stages=args.max_stages, jobs=args.jobs, stats=stats)
        except InfeasiblePlan as exc:
            over = "unknown" if math.isinf(exc.overshoot) else f"{exc.overshoot / 1e9:.3f} GB"
            print(f"[{preset}] infeasible: {exc} (smallest memory overshoot {over})", file=sys.stderr)
            status = EXIT_INFEASIBLE
            continue
        log.info("[%s] %d frontiers built, %d infeasible, %.1fs", preset,
                 stats.frontiers_built, stats.frontiers_infeasible, stats.seconds)
        if len(presets) > 1:
            print(f"[{preset}]")
        print_plan(plan)
        if args.out:
            recorded = {
                "preset": preset,
                "grid_step": args.grid_step,
                "frontier_cap": opts.frontier_cap,
                "tp_within_node": opts.tp_within_node,
                "global_batch": args.global_batch,
            }
            write_plan(args.out.replace("{preset}", preset), plan_document(plan, model, cluster, params, recorded))
    return status


def _eval_rows(model, cluster, params, G, B, configs, table=None):
    S = len(configs)
    ctx = IterationContext(G, S, B, cluster.mem_budget)
    rows = []
    for cfg in configs:
        try:
            ctx.check(cfg)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        rows.append(stage_cost(cfg, ctx, model, cluster, params, table))
    return rows


def cmd_eval(args) -> int:
    if args.plan:
        lp = load_plan(args.plan)
        model, cluster, params = lp.model, lp.cluster, lp.params
        G, B = lp.plan.G, lp.plan.B_global
        configs = [s.config for s in lp.plan.stages]
    else:
        if not (args.model and args.cluster and args.stages and args.global_batch and args.grad_accum):
            raise InputError("eval needs --plan, or --model --cluster --stages --global-batch --grad-accum")
        model = load_model(args.model)
        cluster = load_cluster(args.cluster, args.mem_headroom)
        params = _params(args)
        G, B = args.grad_accum[0], args.global_batch
        raw = _read_yaml(args.stages)
        if isinstance(raw, Mapping):
            raw = raw.get("stages")
        if not isinstance(raw, list) or not raw:
            raise InputError(f"{args.stages}: expected a non-empty list of stage configs")
        try:
            configs = [StageConfig.from_dict(r) for r in raw]
        except (TypeError, ValueError) as exc:
            raise InputError(f"{args.stages}: {exc}") from exc
    try:
        IterationContext(G, len(configs), B, cluster.mem_budget)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    costs = _eval_rows(model, cluster, params, G, B, configs)
    print(f"{'stage':>5} {'t':>14} {'d':>14} {'mem_fwd_GB':>11} {'mem_bwd_GB':>11} {'fits':>5}")
    for i, c in enumerate(costs, start=1):
        fits = "yes" if c.mem_peak <= cluster.mem_budget else "NO"
        print(f"{i:>5} {c.t!r:>14} {c.d!r:>14} {c.mem_fwd_peak / 1e9:>11.4f} {c.mem_bwd_peak / 1e9:>11.4f} {fits:>5}")
    value = objective(PipelinePlan(G, tuple(c.t for c in costs), tuple(c.d for c in costs)))
    print(f"objective {value!r}")
    if args.plan:
        same = value == lp.plan.objective and all(
            c.t == s.t and c.d == s.d for c, s in zip(costs, lp.plan.stages)
        )
        print(f"matches stored plan: {'yes' if same else 'NO'}")
        if not same:
            return EXIT_INPUT
    return EXIT_OK


def _pipeline(args) -> PipelinePlan:
    return load_plan(args.plan).plan.pipeline()


def cmd_simulate(args) -> int:
    p = _pipeline(args)
    formula = objective(p)
    makespan, _ = simulate(p)
    print(f"objective {formula!r}")
    print(f"simulated {makespan!r}")
    print(f"closed-form makespan {closed_form_makespan(p)!r}")
    print(f"gap {formula - makespan!r}")
    return EXIT_OK


def cmd_gantt(args) -> int:
    _, tl = simulate(_pipeline(args))
    text = export_gantt(tl, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pareto(args) -> int:
    model = load_model(args.model)
    cluster = load_cluster(args.cluster, args.mem_headroom)
    params = _params(args)
    table = load_op_times(args.op_times) if args.op_times else None
    try:
        n, m = (int(x) for x in args.mesh.split(","))
        G = args.grad_accum[0] if args.grad_accum else 1
        ctx = IterationContext(G, args.num_stages, args.global_batch, cluster.mem_budget)
        space = IntraSearchSpace(args.stage_index, args.layers, n, m, G, args.global_batch, model.heads,
                                 _options(args, args.preset))
    except ValueError as exc:
        raise InputError(f"bad candidate: {exc}") from exc
    try:
        fr = tune_intra(space, ctx, model, cluster, params, table)
    except NoFeasibleConfig as exc:
        print(f"infeasible: {exc} (overshoot {exc.overshoot / 1e9:.3f} GB)", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        cols = [f.name for f in dataclasses.fields(StageConfig)]
        wr = csv.writer(out)
        wr.writerow(["t", "d", "mem_peak", *cols])
        for e in fr:
            cd = e.config.to_dict()
            wr.writerow([repr(e.t), repr(e.d), repr(e.mem_peak), *(cd[c] for c in cols)])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_fit_intf(args) -> int:
    try:
        obs = read_observations(args.observations)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{args.observations}: {exc}") from exc
    if not obs:
        raise InputError(f"{args.observations}: no observations")
    try:
        params = fit_params(obs, max_sweeps=args.max_sweeps)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    # all-zero rows carry no information and are skipped by the fit too
    used = [(v, o) for v, o in obs if any(v.as_tuple())]
    pred = [pred_intf_scalar(v.as_tuple(), params) for v, _ in used]
    loss = relative_loss(np.asarray(pred), np.asarray([o for _, o in used]))
    print(f"final loss {loss!r}")
    doc = {"factors": params.to_dict()}
    if args.out:
        Path(args.out).write_text(yaml.safe_dump(doc, sort_keys=False))
    else:
        sys.stdout.write(yaml.safe_dump(doc, sort_keys=False))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, specs_required: bool = True) -> None:
    p.add_argument("--model", required=specs_required, help="model spec YAML")
    p.add_argument("--cluster", required=specs_required, help="cluster spec YAML (bytes, flop/s, bytes/s, seconds)")
    p.add_argument("--interference", help="interference factors YAML (default built-in factors)")
    p.add_argument("--op-times", help="measured op times YAML (seconds)")
    p.add_argument("--mem-headroom", type=float, help="usable fraction of device memory, overrides the cluster file")
    p.add_argument("--global-batch", type=int, required=specs_required, help="global batch size (samples)")
    p.add_argument("--grad-accum", type=int, nargs="+", help="gradient-accumulation step(s) G to consider")


def _search(p: argparse.ArgumentParser, allow_all: bool) -> None:
    choices = (*PRESETS, "all") if allow_all else PRESETS
    p.add_argument("--preset", default="full", choices=choices, help="search-space restriction")
    p.add_argument("--grid-step", type=float, default=1 / 8, help="offload-ratio grid step, 1/k")
    p.add_argument("--frontier-cap", type=int, default=16,
                   help="frontier points kept per stage candidate (0 keeps all)")
    p.add_argument("--tp-across-nodes", action="store_true", help="allow tensor parallelism across nodes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pipeplan", description="Training-plan tuner for pipelined LLM training.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="search for the best training plan")
    _common(p)
    _search(p, allow_all=True)
    p.add_argument("--max-stages", type=int, help="upper bound on pipeline stages")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (sharded by G)")
    p.add_argument("--seed", type=int, default=0, help="unused; the search is deterministic")
    p.add_argument("--out", help="plan file to write; '{preset}' is replaced with the preset name")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="cost report for a plan or explicit stage configs")
    p.add_argument("--plan")
    _common(p, specs_required=False)
    p.add_argument("--stages", help="YAML list of stage configs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="compare the objective with the event simulator")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gantt", help="render the simulated schedule")
    p.add_argument("--plan", required=True)
    p.add_argument("--format", default="rows-text", choices=("rows-text", "svg"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_gantt)

    p = sub.add_parser("pareto", help="dump one stage candidate's frontier as CSV")
    _common(p)
    _search(p, allow_all=False)
    p.add_argument("--num-stages", type=int, default=1)
    p.add_argument("--stage-index", type=int, default=1)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--mesh", required=True, help="submesh as n,m")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("fit-intf", help="fit interference factors from observations CSV")
    p.add_argument("--observations", required=True, help="CSV with columns C,G2G,C2G,G2C,total (seconds)")
    p.add_argument("--max-sweeps", type=int, default=60)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_intf)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
