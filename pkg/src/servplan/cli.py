"""servplan command line: search, simulate, sweep, synth-profile, synth-trace."""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Optional, Sequence

from .batching import BatchPolicy
from .cluster import parse_cluster_spec
from .cost import GridSpec, MissingTableError, ProfileError, dump_profiles, load_profiles, synth_profiles
from .ir import ConfigError, parse_model_config, to_transformer_ir
from .planner import DEFAULT_MAX_COMBINATIONS, InfeasibleError, TemplateError, generate_plans, plan_from_doc
from .simulator import SimConfig, search, simulate_plan, sweep_max_batch
from .traces import WORKLOADS, LengthDistribution, TraceError, dump_trace, load_trace, synth_trace

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("servplan")


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _policy(args) -> BatchPolicy:
    return BatchPolicy(mode=args.batching, chunk_size=args.chunk_size, max_batch_size=args.max_batch_size)


def _sim_config(args, frequency: Optional[float] = None) -> SimConfig:
    return SimConfig(policy=_policy(args), frequency=frequency, ttft_anchor=args.ttft_anchor,
                     keep_iterations=bool(getattr(args, "emit_iterations", None)))


def _load_inputs(args):
    model = parse_model_config(Path(args.model))
    block = to_transformer_ir(model)
    dtypes = {model.weight_dtype.name.lower(), model.activation_dtype.name.lower()}
    cluster = parse_cluster_spec(Path(args.cluster), required_dtypes=dtypes)
    store = load_profiles(args.profiles)
    trace = load_trace(args.trace)
    return model, block, cluster, store, trace


def _table(rows: list[dict[str, Any]]) -> str:
    cols = ["rank", "label", "frequency_ghz", "e2e_latency_s", "total_energy_j", "mean_ttft_s", "mean_tpot_s",
            "p95_latency_s", "mfu", "mbu"]
    fmt = {float: lambda v: f"{v:.4g}"}
    lines = ["  ".join(cols)]
    for row in rows:
        lines.append("  ".join(fmt.get(type(row.get(c)), str)(row.get(c)) for c in cols))
    return "\n".join(lines)


def cmd_search(args) -> int:
    model, block, cluster, store, trace = _load_inputs(args)
    plans = generate_plans(block, cluster, reserve=args.reserve, include_embeddings=not args.no_embeddings,
                           max_combinations=args.max_combinations)
    freqs = args.freq or [cluster.device.max_frequency]
    ranked = search(plans, trace, store, args.objective, freqs, _sim_config(args), workers=args.workers)
    entries = []
    for i, e in enumerate(ranked):
        entries.append({"rank": i + 1, "summary": e.report.summary(), "plan": e.report.plan})
    report = {"objective": args.objective, "model": model.name, "num_devices": cluster.num_devices,
              "num_plans": len(plans), "frequencies_ghz": sorted(set(freqs)), "num_requests": len(trace),
              "entries": entries}
    best = ranked[0]
    best_doc = dict(best.report.plan, frequency_ghz=best.frequency, report=best.report.to_doc())
    out = Path(args.out_dir)
    write_atomic(out / "ranked.json", _dumps(report))
    write_atomic(out / "best_plan.json", _dumps(best_doc))
    print(_table([dict(rank=x["rank"], **x["summary"]) for x in entries[: args.top_k]]))
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, block, cluster, store, trace = _load_inputs(args)
    doc = json.loads(Path(args.plan).read_text())
    plan = plan_from_doc(doc, block, cluster, reserve=args.reserve, include_embeddings=not args.no_embeddings)
    freq = args.freq[0] if args.freq else doc.get("frequency_ghz")
    report = simulate_plan(plan, trace, store, _sim_config(args, freq))
    text = _dumps(report.to_doc())
    if args.emit_iterations:
        write_atomic(args.emit_iterations,
                     "".join(json.dumps(r.to_doc()) + "\n" for r in report.iterations))
    if args.out:
        write_atomic(args.out, text)
    print(_table([dict(rank=1, **report.summary())]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, block, cluster, store, trace = _load_inputs(args)
    doc = json.loads(Path(args.plan).read_text())
    plan = plan_from_doc(doc, block, cluster, reserve=args.reserve, include_embeddings=not args.no_embeddings)
    freq = args.freq[0] if args.freq else doc.get("frequency_ghz")
    rows = sweep_max_batch(plan, trace, store, args.segments, _sim_config(args, freq), args.probe_requests)
    table = [{"max_batch_size": r.max_batch_size, "mean_tpot_s": r.mean_tpot, "e2e_latency_s": r.e2e_latency,
              "p95_latency_s": r.p95_latency, "total_energy_j": r.total_energy} for r in rows]
    if args.out:
        write_atomic(args.out, _dumps({"plan": plan.label(), "rows": table}))
    print("max_batch_size  mean_tpot_s  e2e_latency_s  p95_latency_s")
    for r in rows:
        print(f"{r.max_batch_size:>14}  {r.mean_tpot:.4g}  {r.e2e_latency:.4g}  {r.p95_latency:.4g}")
    return EXIT_OK


def cmd_synth_profile(args) -> int:
    cluster = parse_cluster_spec(Path(args.cluster))
    overrides: dict[str, Any] = {}
    if args.dtypes:
        overrides["dtypes"] = tuple(args.dtypes)
    if args.model:
        model = parse_model_config(Path(args.model))
        grid = GridSpec.for_model(model, cluster.num_devices, **overrides)
    else:
        grid = GridSpec(**overrides)
    store = synth_profiles(cluster.device, cluster, grid)
    buf = io.StringIO()
    dump_profiles(store, buf)
    write_atomic(args.out, buf.getvalue())
    print(f"wrote {len(store.records())} profile records to {args.out}")
    return EXIT_OK


def cmd_synth_trace(args) -> int:
    if args.workload:
        ctx, gen, n = WORKLOADS[args.workload]
    else:
        ctx = gen = None
        n = 0
    ctx = LengthDistribution(args.ctx_mean, args.ctx_std) if args.ctx_mean is not None else ctx
    gen = LengthDistribution(args.gen_mean, args.gen_std) if args.gen_mean is not None else gen
    if ctx is None or gen is None:
        raise ConfigError("give --workload or both --ctx-mean and --gen-mean")
    n = args.n if args.n is not None else n
    trace = synth_trace(ctx, gen, args.rate, n, args.seed, name=args.workload or "custom")
    buf = io.StringIO()
    dump_trace(trace, buf)
    write_atomic(args.out, buf.getvalue())
    print(f"wrote {len(trace)} requests to {args.out}")
    return EXIT_OK


def _sim_flags(p: argparse.ArgumentParser, need_plan: bool = False) -> None:
    p.add_argument("--config", help="JSON file whose keys provide defaults for these flags")
    p.add_argument("--model", help="model config JSON")
    p.add_argument("--cluster", help="cluster spec JSON")
    p.add_argument("--profiles", help="profile JSONL")
    p.add_argument("--trace", help="trace JSONL or CSV")
    if need_plan:
        p.add_argument("--plan", help="plan JSON (from search or hand-written)")
    p.add_argument("--freq", type=float, nargs="+", help="GPU frequencies in GHz")
    p.add_argument("--batching", choices=["contiguous", "chunked"], default="contiguous")
    p.add_argument("--chunk-size", type=int, default=512)
    p.add_argument("--max-batch-size", type=int, default=None)
    p.add_argument("--ttft-anchor", choices=["arrival", "admission"], default="arrival")
    p.add_argument("--reserve", type=float, default=0.1, help="memory fraction held back for activations")
    p.add_argument("--no-embeddings", action="store_true", help="leave embedding weights out of memory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="servplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="rank every feasible plan")
    _sim_flags(p)
    p.add_argument("--objective", choices=["latency", "energy"], default="latency")
    p.add_argument("--workers", type=int, default=None, help="parallel simulations (default: CPU count)")
    p.add_argument("--max-combinations", type=int, default=DEFAULT_MAX_COMBINATIONS)
    p.add_argument("--out-dir", default="search_out")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("simulate", help="replay one plan")
    _sim_flags(p, need_plan=True)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--emit-iterations", help="write per-iteration records as JSONL")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="max-batch-size sweep for one plan")
    _sim_flags(p, need_plan=True)
    p.add_argument("--segments", type=int, default=4)
    p.add_argument("--probe-requests", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-profile", help="write analytical roofline profiles")
    p.add_argument("--config")
    p.add_argument("--cluster", required=False)
    p.add_argument("--model", help="cover this model's shapes exactly")
    p.add_argument("--dtypes", nargs="+")
    p.add_argument("--out", default="profiles.jsonl")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_synth_profile)

    p = sub.add_parser("synth-trace", help="write a Poisson-arrival trace")
    p.add_argument("--config")
    p.add_argument("--workload", choices=sorted(WORKLOADS))
    p.add_argument("--ctx-mean", type=float)
    p.add_argument("--ctx-std", type=float, default=0.0)
    p.add_argument("--gen-mean", type=float)
    p.add_argument("--gen-std", type=float, default=0.0)
    p.add_argument("--rate", type=float, default=1.0, help="requests per second")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="trace.jsonl")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_synth_trace)
    return parser


_PATH_FLAGS = ("model", "cluster", "profiles", "trace", "plan")


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        cfg = json.loads(cfg_path.read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest in _PATH_FLAGS and isinstance(value, str) and not Path(value).is_absolute():
                value = str(cfg_path.parent / value)
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    required = {"search": ("model", "cluster", "profiles", "trace"),
                "simulate": ("model", "cluster", "profiles", "trace", "plan"),
                "sweep": ("model", "cluster", "profiles", "trace", "plan"),
                "synth-profile": ("cluster",)}.get(args.command, ())
    missing = [f"--{r}" for r in required if not getattr(args, r, None)]
    if missing:
        parser.error(f"{args.command}: missing {' '.join(missing)}")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
    except (OSError, json.JSONDecodeError, AttributeError) as exc:
        print(f"error: bad --config: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, TraceError, ProfileError, MissingTableError, TemplateError, ValueError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
