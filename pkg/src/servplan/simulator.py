"""Serving simulation of execution plans against a profile store."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .batching import BatchPolicy, BatchState, IterationWorkload, run_batching
from .cluster import collective_span
from .cost import CollectiveQuery, OpQuery, ProfileStore, op_bytes, op_flops
from .ir import dtype_key
from .planner import ExecutionPlan, InfeasibleError
from .traces import Request, Trace


@dataclass(frozen=True)
class SimConfig:
    policy: BatchPolicy = BatchPolicy()
    frequency: Optional[float] = None  # GHz; None = device maximum
    ttft_anchor: str = "arrival"  # or "admission"
    keep_iterations: bool = False


@dataclass(frozen=True)
class IterationRecord:
    replica: int
    clock_start: float
    duration: float
    energy: float
    batch_size: int
    prefill_tokens: int
    decode_count: int
    stage_seconds: tuple[float, ...]
    stage_joules: tuple[float, ...]

    def to_doc(self) -> dict[str, Any]:
        return {"replica": self.replica, "clock_start": self.clock_start, "duration": self.duration,
                "energy": self.energy, "batch_size": self.batch_size, "prefill_tokens": self.prefill_tokens,
                "decode_count": self.decode_count, "stage_seconds": list(self.stage_seconds),
                "stage_joules": list(self.stage_joules)}


@dataclass
class SimulationReport:
    plan: dict[str, Any]
    frequency: float
    num_requests: int
    e2e_latency: float
    total_energy: float
    ttft: dict[str, float]
    tpot: dict[str, float]
    latency: dict[str, float]
    p95_latency: float
    mfu: float
    mbu: float
    rejected: list[str]
    num_iterations: int
    max_batch_size: int
    evictions: int
    iterations: list[IterationRecord] = field(default_factory=list)

    @property
    def mean_ttft(self) -> float:
        return float(np.mean(list(self.ttft.values()))) if self.ttft else 0.0

    @property
    def mean_tpot(self) -> float:
        return float(np.mean(list(self.tpot.values()))) if self.tpot else 0.0

    @property
    def completed(self) -> int:
        return len(self.latency)

    def summary(self) -> dict[str, Any]:
        return {"label": self.plan.get("label"), "frequency_ghz": self.frequency,
                "e2e_latency_s": self.e2e_latency, "total_energy_j": self.total_energy,
                "mean_ttft_s": self.mean_ttft, "mean_tpot_s": self.mean_tpot, "p95_latency_s": self.p95_latency,
                "mfu": self.mfu, "mbu": self.mbu, "completed": self.completed, "rejected": len(self.rejected)}

    def to_doc(self, include_iterations: bool = False) -> dict[str, Any]:
        doc = {
            "plan": self.plan,
            "frequency_ghz": self.frequency,
            "num_requests": self.num_requests,
            "completed": self.completed,
            "rejected": list(self.rejected),
            "e2e_latency_s": self.e2e_latency,
            "total_energy_j": self.total_energy,
            "mean_ttft_s": self.mean_ttft,
            "mean_tpot_s": self.mean_tpot,
            "p95_latency_s": self.p95_latency,
            "mfu": self.mfu,
            "mbu": self.mbu,
            "num_iterations": self.num_iterations,
            "max_batch_size": self.max_batch_size,
            "evictions": self.evictions,
            "ttft_s": dict(self.ttft),
            "tpot_s": dict(self.tpot),
        }
        if include_iterations:
            doc["iterations"] = [r.to_doc() for r in self.iterations]
        return doc


def split_tokens(work: IterationWorkload, groups: int) -> list[tuple[list[int], int]]:
    """Share one iteration's work among cell-level data-parallel groups.

    Prefill items go whole to the least-loaded group; decode tokens are
    spread evenly with the remainder on the lowest-index groups.
    """
    base, extra = divmod(work.decode_count, groups)
    decode = [base + (1 if g < extra else 0) for g in range(groups)]
    totals = list(decode)
    items: list[list[int]] = [[] for _ in range(groups)]
    for _rid, t in work.prefill_items:
        g = min(range(groups), key=lambda i: (totals[i], i))
        items[g].append(t)
        totals[g] += t
    return [(items[g], decode[g]) for g in range(groups)]


@dataclass
class _IterCost:
    stage_seconds: tuple[float, ...]
    stage_joules: tuple[float, ...]
    flops: float
    bytes: float


class PlanCostModel:
    """Per-iteration time and energy of one replica of a plan.

    Only one block is costed; a stage's time is its repetition count times
    the block time plus the outgoing activation transfer.
    """

    def __init__(self, plan: ExecutionPlan, store: ProfileStore, freq: float, replica: int = 0):
        self.plan = plan
        self.store = store
        self.freq = float(freq)
        self.replica = replica
        model = plan.model
        self.dtypes = {"weight": dtype_key(model.weight_dtype), "activation": dtype_key(model.activation_dtype)}
        self.elem = {"weight": model.weight_dtype.bytes_per_element,
                     "activation": model.activation_dtype.bytes_per_element}
        self.act_bytes_per_token = model.hidden_size * model.activation_dtype.bytes_per_element
        sc = plan.scheme
        self.reps = [hi - lo for lo, hi in sc.stage_partition]
        self.cells = []
        for cs in sc.per_cell:
            profiles: dict[tuple, int] = {}
            for dev_ops in cs.task_mapping.ops:
                profiles[dev_ops] = profiles.get(dev_ops, 0) + 1
            self.cells.append((cs, sorted(profiles.items(), key=lambda kv: -kv[1])))
        asg = plan.assignment
        self.spans: list[list[list[list[tuple[int, int]]]]] = []  # stage -> cell -> op -> group spans
        for st in range(sc.num_stages):
            per_cell = []
            for ops in sc.reshards:
                per_op = []
                for op in ops:
                    spans = []
                    for grp in op.groups:
                        sp = collective_span(asg, [(replica, st, j) for j in grp])
                        spans.append((sp.num_devices, sp.num_nodes_spanned))
                    per_op.append(spans)
                per_cell.append(per_op)
            self.spans.append(per_cell)
        self.p2p = []
        for st in range(sc.num_stages - 1):
            sp = collective_span(asg, [(replica, st, 0), (replica, st + 1, 0)])
            self.p2p.append((sp.num_devices, sp.num_nodes_spanned))
        self._cache: dict[tuple, _IterCost] = {}

    def _op(self, op, tokens: float) -> tuple[float, float, float, float]:
        dims = (tokens * op.token_scale,) + op.dims
        sec, jou = self.store.lookup(OpQuery(op.op, self.dtypes[op.dtype_role], self.freq, dims))
        return sec, jou, op_flops(op.op, dims), op_bytes(op.op, dims, self.elem[op.dtype_role])

    def _cell(self, cs, profiles, loads) -> tuple[float, float, float, float]:
        """(time, energy, flops, bytes) of one cell over all its groups."""
        worst = 0.0
        energy = flops = nbytes = 0.0
        for items, decode in loads:
            tokens = list(items) + ([decode] if decode else [])
            group_time = 0.0
            for dev_ops, count in profiles:
                t = 0.0
                for op in dev_ops:
                    for tk in tokens:
                        s, j, f, b = self._op(op, tk)
                        t += s
                        energy += j * count
                        flops += f * count
                        nbytes += b * count
                group_time = max(group_time, t)
            worst = max(worst, group_time)
        return worst, energy, flops, nbytes

    def _collectives(self, stage: int, cell_idx: int, loads, total_tokens: int) -> tuple[float, float]:
        t_sum = e_sum = 0.0
        for op, spans in zip(self.plan.scheme.reshards[cell_idx], self.spans[stage][cell_idx]):
            worst = 0.0
            for g, (devices, nodes) in enumerate(spans):
                if op.tokens == "stage":
                    tokens = total_tokens
                else:
                    items, decode = loads[g]
                    tokens = sum(items) + decode
                if tokens == 0:
                    continue
                s, j = self.store.lookup(
                    CollectiveQuery(op.kind, op.payload_bytes_per_token * tokens, devices, nodes))
                worst = max(worst, s)
                e_sum += j
            t_sum += worst
        return t_sum, e_sum

    def cost(self, work: IterationWorkload) -> _IterCost:
        key = (tuple(t for _, t in work.prefill_items), work.decode_count)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        total = work.total_tokens
        block_t = block_e = block_f = block_b = 0.0
        cell_loads = []
        for cs, profiles in self.cells:
            loads = split_tokens(work, cs.cell_dp)
            cell_loads.append(loads)
            t, e, f, b = self._cell(cs, profiles, loads)
            block_t += t
            block_e += e
            block_f += f
            block_b += b
        secs, joules = [], []
        flops = nbytes = 0.0
        for st, reps in enumerate(self.reps):
            ct = ce = 0.0
            for i in range(len(self.cells)):
                t, e = self._collectives(st, i, cell_loads[i], total)
                ct += t
                ce += e
            s = reps * (block_t + ct)
            j = reps * (block_e + ce)
            if st < len(self.p2p) and total:
                devices, nodes = self.p2p[st]
                ps, pj = self.store.lookup(CollectiveQuery("P2P", self.act_bytes_per_token * total, devices, nodes))
                s += ps
                j += pj
            secs.append(s)
            joules.append(j)
            flops += reps * block_f
            nbytes += reps * block_b
        out = _IterCost(tuple(secs), tuple(joules), flops, nbytes)
        if len(self._cache) < 65536:
            self._cache[key] = out
        return out


def iteration_time(plan: ExecutionPlan, w: IterationWorkload, store: ProfileStore, freq: float,
                   replica: int = 0) -> tuple[list[float], list[float]]:
    """Per-stage seconds and joules of one iteration of one replica."""
    c = PlanCostModel(plan, store, freq, replica).cost(w)
    return list(c.stage_seconds), list(c.stage_joules)


def split_trace(trace: Trace, replicas: int) -> list[list[Request]]:
    """Round-robin assignment of arrival-ordered requests to model replicas."""
    parts: list[list[Request]] = [[] for _ in range(replicas)]
    for i, r in enumerate(trace.requests):
        parts[i % replicas].append(r)
    return parts


def simulate_plan(plan: ExecutionPlan, trace: Trace, store: ProfileStore,
                  cfg: SimConfig = SimConfig()) -> SimulationReport:
    device = plan.assignment.cluster.device
    freq = cfg.frequency if cfg.frequency is not None else device.max_frequency
    if plan.kv_capacity_bytes <= 0 and len(trace):
        raise InfeasibleError(f"plan {plan.label()} leaves no memory for the KV cache")
    records: list[IterationRecord] = []
    totals = {"flops": 0.0, "bytes": 0.0, "energy": 0.0, "iters": 0, "max_batch": 0}
    states = []
    for r, reqs in enumerate(split_trace(trace, plan.scheme.model_dp)):
        model = PlanCostModel(plan, store, freq, r)
        last: dict[str, _IterCost] = {}

        def cost_fn(work: IterationWorkload, model=model, last=last) -> float:
            c = model.cost(work)
            last["c"] = c
            return max(c.stage_seconds)

        def on_iter(start: float, work: IterationWorkload, _state, r=r, last=last) -> None:
            c = last["c"]
            energy = sum(c.stage_joules)
            totals["flops"] += c.flops
            totals["bytes"] += c.bytes
            totals["energy"] += energy
            totals["iters"] += 1
            totals["max_batch"] = max(totals["max_batch"], work.batch_size)
            if cfg.keep_iterations:
                records.append(IterationRecord(r, start, max(c.stage_seconds), energy, work.batch_size,
                                               sum(t for _, t in work.prefill_items), work.decode_count,
                                               c.stage_seconds, c.stage_joules))

        state = BatchState.for_requests(reqs, plan.kv_capacity_bytes, plan.kv_bytes_per_token)
        states.append(run_batching(state, cfg.policy, cost_fn, on_iter))

    completions = {c.request.id: c for s in states for c in s.completed}
    ttft, tpot, latency = {}, {}, {}
    for req in trace.requests:
        c = completions.get(req.id)
        if c is None:
            continue
        anchor = req.arrival if cfg.ttft_anchor == "arrival" else c.admitted_at
        ttft[req.id] = c.first_token_time - anchor
        latency[req.id] = c.finish_time - req.arrival
        if req.gen_len >= 2:
            tpot[req.id] = (c.finish_time - c.first_token_time) / (req.gen_len - 1)
    rejected = [r.id for s in states for r in s.rejected]
    e2e = max((s.clock for s in states), default=0.0) if len(trace) else 0.0
    n_dev = plan.scheme.num_devices
    dtypes = {dtype_key(plan.model.weight_dtype), dtype_key(plan.model.activation_dtype)}
    peak_flops = max(device.flops(d) for d in dtypes)
    mfu = totals["flops"] / (e2e * n_dev * peak_flops) if e2e > 0 else 0.0
    mbu = totals["bytes"] / (e2e * n_dev * device.peak_mem_bandwidth) if e2e > 0 else 0.0
    p95 = float(np.percentile(list(latency.values()), 95)) if latency else 0.0
    return SimulationReport(
        plan=plan.to_doc(), frequency=freq, num_requests=len(trace), e2e_latency=e2e,
        total_energy=totals["energy"], ttft=ttft, tpot=tpot, latency=latency, p95_latency=p95,
        mfu=mfu, mbu=mbu, rejected=rejected, num_iterations=totals["iters"],
        max_batch_size=totals["max_batch"], evictions=sum(s.evictions for s in states), iterations=records,
    )


OBJECTIVES = ("latency", "energy")


@dataclass
class RankedEntry:
    plan: ExecutionPlan
    frequency: float
    report: SimulationReport

    def sort_key(self, objective: str) -> tuple:
        lat, en = self.report.e2e_latency, self.report.total_energy
        primary = (lat, en) if objective == "latency" else (en, lat)
        return primary + (self.plan.encoding, self.frequency)


_WORKER: dict[str, Any] = {}


def _init_worker(plans, trace, store, cfg) -> None:
    _WORKER.update(plans=plans, trace=trace, store=store, cfg=cfg)


def _run_job(job: tuple[int, float]) -> tuple[int, float, SimulationReport]:
    i, f = job
    cfg = replace(_WORKER["cfg"], frequency=f)
    return i, f, simulate_plan(_WORKER["plans"][i], _WORKER["trace"], _WORKER["store"], cfg)


def search(plans: Sequence[ExecutionPlan], trace: Trace, store: ProfileStore, objective: str = "latency",
           freq_options: Optional[Iterable[float]] = None, cfg: SimConfig = SimConfig(),
           workers: Optional[int] = None) -> list[RankedEntry]:
    """Simulate every (plan, frequency) pair and rank by the objective."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if not plans:
        raise InfeasibleError("no feasible plan to search")
    freqs = sorted(set(freq_options)) if freq_options else [plans[0].assignment.cluster.device.max_frequency]
    jobs = [(i, f) for i in range(len(plans)) for f in freqs]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(plans, trace, store, cfg)
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(list(plans), trace, store, cfg)) as pool:
            results = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    entries = [RankedEntry(plans[i], f, rep) for i, f, rep in results]
    entries.sort(key=lambda e: e.sort_key(objective))
    return entries


@dataclass(frozen=True)
class SweepRow:
    max_batch_size: int
    mean_tpot: float
    e2e_latency: float
    p95_latency: float
    total_energy: float


def sweep_max_batch(plan: ExecutionPlan, trace: Trace, store: ProfileStore, segments: int,
                    cfg: SimConfig = SimConfig(), probe_requests: Optional[int] = None) -> list[SweepRow]:
    """Simulate under batch caps i*m/n, where m is the largest batch seen unconstrained."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    probe = trace.subset(probe_requests) if probe_requests else trace
    free = replace(cfg, policy=replace(cfg.policy, max_batch_size=None))
    m = max(simulate_plan(plan, probe, store, free).max_batch_size, 1)
    rows = []
    for i in range(1, segments + 1):
        cap = max(1, math.ceil(i * m / segments))
        rep = simulate_plan(plan, trace, store, replace(cfg, policy=replace(cfg.policy, max_batch_size=cap)))
        rows.append(SweepRow(cap, rep.mean_tpot, rep.e2e_latency, rep.p95_latency, rep.total_energy))
    return rows
