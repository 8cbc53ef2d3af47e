"""Parallel scheme enumeration, parallel templates, and execution plans."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from .cluster import ClusterSpec, DeviceAssignment, map_devices
from .cost import kv_bytes_per_token
from .ir import BlockSpec, CellSpec, ModelSpec, embedding_params

logger = logging.getLogger(__name__)

DEFAULT_MAX_COMBINATIONS = 4096


class TemplateError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    """No enumerated scheme fits the model on the cluster."""


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass(frozen=True)
class OpShape:
    """One op a device runs for a cell: width dims plus a token multiplier."""

    op: str
    dims: tuple[float, ...]  # op axes minus the leading tokens axis
    token_scale: float = 1.0
    dtype_role: str = "weight"  # "weight" or "activation"


@dataclass(frozen=True)
class TaskMapping:
    tasks: tuple[tuple[int, ...], ...]  # per device of one intra-layer group
    weight_params: tuple[float, ...]  # per device
    kv_heads: tuple[int, ...] = ()  # attention only; includes replicated heads
    ops: tuple[tuple[OpShape, ...], ...] = ()  # per device

    @property
    def devices(self) -> int:
        return len(self.tasks)


def _split(num: int, parts: int) -> list[range]:
    step = num // parts
    return [range(i * step, (i + 1) * step) for i in range(parts)]


def _attention_template(cell: CellSpec, c: int) -> TaskMapping:
    h, d, hidden = cell.num_tasks, cell.head_dim, cell.hidden_size
    group = cell.kv_group_size
    tasks, params, kvs, ops = [], [], [], []
    for heads in _split(h, c):
        hl = len(heads)
        # kv heads this device needs; replicated when a group straddles devices
        kvl = heads[-1] // group - heads[0] // group + 1
        tasks.append(tuple(heads))
        kvs.append(kvl)
        params.append(hidden * hl * d + 2 * hidden * kvl * d + hl * d * hidden)
        ops.append((
            OpShape("gemm", ((hl + 2 * kvl) * d, hidden)),
            OpShape("attention", (hl, d), dtype_role="activation"),
            OpShape("gemm", (hidden, hl * d)),
        ))
    return TaskMapping(tuple(tasks), tuple(params), tuple(kvs), tuple(ops))


def _dense_ffn_template(cell: CellSpec, c: int) -> TaskMapping:
    hidden = cell.hidden_size
    inter = cell.intermediate_size / c
    up = 2 * inter if cell.kind == "SwiGLU" else inter
    mats = 3 if cell.kind == "SwiGLU" else 2
    tasks = tuple(tuple(r) for r in _split(cell.num_tasks, c))
    p = mats * hidden * inter
    ops = (OpShape("gemm", (up, hidden)), OpShape("gemm", (hidden, inter)))
    return TaskMapping(tasks, (p,) * c, (), (ops,) * c)


def _moe_template(cell: CellSpec, c: int, kind: str) -> TaskMapping:
    hidden, inter, e, k = cell.hidden_size, cell.intermediate_size, cell.num_experts, cell.experts_per_token
    router = OpShape("gemm", (e, hidden))
    if kind == "EP":
        el = e // c
        tasks = tuple(tuple(r) for r in _split(e, c))
        scale = k * el / e
        p = el * 3 * hidden * inter + hidden * e
        ops = (router, OpShape("moe_gemm", (el, 2 * inter, hidden), scale),
               OpShape("moe_gemm", (el, hidden, inter), scale))
    else:
        # every expert sliced across the group; task id = expert * c + slice
        sl = inter / c
        tasks = tuple(tuple(x * c + j for x in range(e)) for j in range(c))
        p = e * 3 * hidden * sl + hidden * e
        ops = (router, OpShape("moe_gemm", (e, 2 * sl, hidden), k),
               OpShape("moe_gemm", (e, hidden, sl), k))
    return TaskMapping(tasks, (p,) * c, (), (ops,) * c)


def template_allows(cell: CellSpec, devices: int, kind: str = "TP") -> bool:
    if devices < 1:
        return False
    if cell.kind == "MoE":
        if kind == "EP":
            return 1 < devices <= cell.num_experts and cell.num_experts % devices == 0
        return cell.tp_granularity % devices == 0
    if kind != "TP":
        return False
    return cell.num_tasks % devices == 0


def apply_template(cell: CellSpec, devices: int, kind: str = "TP") -> TaskMapping:
    """Distribute a cell's tasks evenly over ``devices`` devices of one group."""
    if not template_allows(cell, devices, kind):
        raise TemplateError(f"{cell.kind} cell with {cell.num_tasks} tasks cannot use {kind} over {devices} devices")
    if cell.is_attention:
        return _attention_template(cell, devices)
    if cell.kind in ("MLP", "SwiGLU"):
        return _dense_ffn_template(cell, devices)
    if cell.kind == "MoE":
        return _moe_template(cell, devices, kind)
    raise TemplateError(f"no template for cell kind {cell.kind}")


def cell_op_shapes(cell: CellSpec, max_devices: int) -> set[tuple[str, tuple[float, ...]]]:
    """Every (op, width dims) any template of this cell can emit on <= max_devices."""
    out = set()
    for c in range(1, max_devices + 1):
        for kind in ("TP", "EP"):
            if template_allows(cell, c, kind):
                for dev_ops in apply_template(cell, c, kind).ops:
                    out.update((o.op, o.dims) for o in dev_ops)
    return out


@dataclass(frozen=True)
class CellScheme:
    cell_dp: int
    intra_degree: int
    kind: str  # "TP" or "EP"
    task_mapping: TaskMapping = field(compare=False, repr=False)

    @property
    def encoding(self) -> tuple[int, int, str]:
        return (self.cell_dp, self.intra_degree, self.kind)


@dataclass(frozen=True)
class CollectiveOp:
    kind: str
    payload_bytes_per_token: float
    # concurrent groups as stage-local device indices; "tokens" says which
    # token count scales the payload: the group's share or the whole stage's
    groups: tuple[tuple[int, ...], ...]
    tokens: str = "group"


def cell_options(cell: CellSpec, stage_devices: int) -> list[tuple[int, int, str]]:
    out = []
    for cell_dp in divisors(stage_devices):
        c = stage_devices // cell_dp
        for kind in ("TP", "EP"):
            if kind == "EP" and c == 1:
                continue
            if template_allows(cell, c, kind):
                out.append((cell_dp, c, kind))
    return out


def make_cell_scheme(cell: CellSpec, cell_dp: int, kind: str, stage_devices: int) -> CellScheme:
    if stage_devices % cell_dp:
        raise TemplateError(f"cell_dp {cell_dp} does not divide stage devices {stage_devices}")
    c = stage_devices // cell_dp
    return CellScheme(cell_dp, c, kind, apply_template(cell, c, kind))


def get_reshard_collective(left: CellScheme, right: CellScheme, hidden_size: int = 1,
                           act_bytes: float = 2.0) -> list[CollectiveOp]:
    """Collectives converting the left cell's output layout to the right cell's input layout."""
    s = left.cell_dp * left.intra_degree
    if right.cell_dp * right.intra_degree != s:
        raise ValueError("cells of one stage must span the same devices")
    per_token = hidden_size * act_bytes
    if s == 1:
        return []
    stage = (tuple(range(s)),)
    if left.cell_dp != right.cell_dp:
        # token partition changes: exchange then replicate inside new groups
        return [CollectiveOp("AllToAll", per_token, stage, "stage"),
                CollectiveOp("AllGather", per_token, stage, "stage")]
    ops = []
    c = left.intra_degree
    groups = tuple(tuple(g * c + k for k in range(c)) for g in range(left.cell_dp))
    if c > 1:
        if left.kind == "TP":
            ops.append(CollectiveOp("AllReduce", per_token, groups))
        else:
            ops.append(CollectiveOp("AllToAll", per_token, groups))
    if right.intra_degree > 1 and right.kind == "EP":
        ops.append(CollectiveOp("AllToAll", per_token, groups))
    return ops


@dataclass(frozen=True)
class ParallelScheme:
    model_dp: int
    num_stages: int
    stage_devices: int
    per_cell: tuple[CellScheme, ...]
    # reshards[i] follows cell i; the last entry wraps to the next repetition
    reshards: tuple[tuple[CollectiveOp, ...], ...]
    stage_partition: tuple[tuple[int, int], ...]

    @property
    def num_devices(self) -> int:
        return self.model_dp * self.num_stages * self.stage_devices

    @property
    def primary_intra_degree(self) -> int:
        return max(cs.intra_degree for cs in self.per_cell)

    @property
    def encoding(self) -> tuple:
        return (self.model_dp, self.num_stages, tuple(cs.encoding for cs in self.per_cell))

    def label(self) -> str:
        cells = ",".join(f"{cs.kind.lower()}{cs.intra_degree}x{cs.cell_dp}" for cs in self.per_cell)
        return f"dp{self.model_dp}-pp{self.num_stages}-[{cells}]"


def build_scheme(block: BlockSpec, model_dp: int, num_stages: int,
                 cell_choices: Sequence[tuple[int, str]], num_devices: int) -> ParallelScheme:
    """Scheme from explicit degrees; ``cell_choices`` holds (cell_dp, kind) per cell."""
    if num_devices % model_dp:
        raise TemplateError(f"model_dp {model_dp} does not divide {num_devices} devices")
    m = num_devices // model_dp
    if m % num_stages:
        raise TemplateError(f"{num_stages} stages do not divide {m} replica devices")
    if num_stages > max(block.repeat_count, 1) or (block.repeat_count and block.repeat_count % num_stages):
        raise TemplateError(f"{block.repeat_count} repetitions cannot split evenly into {num_stages} stages")
    if len(cell_choices) != len(block.cells):
        raise TemplateError("one (cell_dp, kind) choice is needed per cell")
    s = m // num_stages
    per_cell = tuple(make_cell_scheme(cell, dp, kind, s) for cell, (dp, kind) in zip(block.cells, cell_choices))
    model = block.model
    hidden = block.cells[0].hidden_size
    act = model.activation_dtype.bytes_per_element if model else 2.0
    n = len(per_cell)
    reshards = tuple(tuple(get_reshard_collective(per_cell[i], per_cell[(i + 1) % n], hidden, act))
                     for i in range(n))
    per_stage = block.repeat_count // num_stages
    partition = tuple((i * per_stage, (i + 1) * per_stage) for i in range(num_stages))
    return ParallelScheme(model_dp, num_stages, s, per_cell, reshards, partition)


def enumerate_schemes(block: BlockSpec, n: int,
                      max_combinations: Optional[int] = DEFAULT_MAX_COMBINATIONS) -> list[ParallelScheme]:
    """All schemes from the model-DP / stage / cell-DP divisor loops."""
    if n < 1:
        raise ValueError("need at least one device")
    seen: set = set()
    schemes = []
    for model_dp in divisors(n):
        m = n // model_dp
        for stages in divisors(m):
            if stages > max(block.repeat_count, 1) or (block.repeat_count and block.repeat_count % stages):
                continue
            s = m // stages
            options = [cell_options(cell, s) for cell in block.cells]
            combos = itertools.product(*options)
            total = math.prod(len(o) for o in options)
            if max_combinations is not None and total > max_combinations:
                logger.warning("dp=%d pp=%d: %d cell combinations capped at %d",
                               model_dp, stages, total, max_combinations)
                combos = itertools.islice(combos, max_combinations)
            for combo in combos:
                key = (model_dp, stages, combo)
                if key in seen:
                    continue
                seen.add(key)
                schemes.append(build_scheme(block, model_dp, stages, [(dp, k) for dp, _c, k in combo], n))
    return schemes


@dataclass(frozen=True)
class ExecutionPlan:
    scheme: ParallelScheme
    assignment: DeviceAssignment
    block: BlockSpec
    stage_weight_bytes: tuple[float, ...]  # per device, per stage (max over the stage's devices)
    kv_capacity_bytes: float  # per replica
    kv_bytes_per_token: float  # per replica, including kv-head replication

    @property
    def model(self) -> ModelSpec:
        assert self.block.model is not None
        return self.block.model

    @property
    def encoding(self) -> tuple:
        return self.scheme.encoding + (self.assignment.physical,)

    def label(self) -> str:
        return self.scheme.label()

    def to_doc(self) -> dict[str, Any]:
        sc = self.scheme
        return {
            "label": sc.label(),
            "model_dp": sc.model_dp,
            "num_stages": sc.num_stages,
            "stage_devices": sc.stage_devices,
            "cells": [
                {"kind": cell.kind, "cell_dp": cs.cell_dp, "intra_degree": cs.intra_degree, "mode": cs.kind,
                 "tasks_per_device": [len(t) for t in cs.task_mapping.tasks]}
                for cell, cs in zip(self.block.cells, sc.per_cell)
            ],
            "reshards": [[{"kind": op.kind, "payload_bytes_per_token": op.payload_bytes_per_token,
                           "group_size": len(op.groups[0]), "groups": len(op.groups)} for op in ops]
                         for ops in sc.reshards],
            "stage_partition": [list(p) for p in sc.stage_partition],
            "assignment": list(self.assignment.physical),
            "stage_weight_bytes": list(self.stage_weight_bytes),
            "kv_capacity_bytes": self.kv_capacity_bytes,
            "kv_bytes_per_token": self.kv_bytes_per_token,
        }


def _stage_weight_bytes(block: BlockSpec, scheme: ParallelScheme, include_embeddings: bool) -> list[float]:
    model = block.model
    wbytes = model.weight_dtype.bytes_per_element
    per_rep = sum(max(cs.task_mapping.weight_params) for cs in scheme.per_cell) * wbytes
    out = []
    for i, (lo, hi) in enumerate(scheme.stage_partition):
        b = per_rep * (hi - lo)
        if include_embeddings:
            emb = embedding_params(model) * wbytes / scheme.stage_devices
            if i == 0:
                b += emb
            if i == scheme.num_stages - 1 and scheme.num_stages > 1:
                b += emb  # tied LM head copy on the last stage
        out.append(b)
    return out


def make_plan(block: BlockSpec, scheme: ParallelScheme, cluster: ClusterSpec,
              assignment: Optional[DeviceAssignment] = None, reserve: float = 0.1,
              include_embeddings: bool = True) -> ExecutionPlan:
    model = block.model
    if model is None:
        raise ValueError("block has no model attached")
    if assignment is None:
        assignment = map_devices(scheme, cluster)
    weights = _stage_weight_bytes(block, scheme, include_embeddings)
    usable = cluster.device.memory_capacity * (1.0 - reserve)
    free_per_stage = [(usable - w) * scheme.stage_devices for w in weights]
    kv_capacity = min(free_per_stage) * scheme.num_stages if free_per_stage else 0.0
    attn = [cs for cell, cs in zip(block.cells, scheme.per_cell) if cell.is_attention]
    replication = 1.0
    if attn:
        kv_heads = [c for c in block.cells if c.is_attention][0].num_kv_heads
        replication = sum(attn[0].task_mapping.kv_heads) / kv_heads
    return ExecutionPlan(scheme, assignment, block, tuple(weights), max(kv_capacity, 0.0),
                         kv_bytes_per_token(model) * replication)


def plan_fits(plan: ExecutionPlan, cluster: ClusterSpec, reserve: float = 0.1) -> bool:
    usable = cluster.device.memory_capacity * (1.0 - reserve)
    return max(plan.stage_weight_bytes) <= usable


def generate_plans(block: BlockSpec, cluster: ClusterSpec, reserve: float = 0.1, include_embeddings: bool = True,
                   max_combinations: Optional[int] = DEFAULT_MAX_COMBINATIONS) -> list[ExecutionPlan]:
    plans = []
    for scheme in enumerate_schemes(block, cluster.num_devices, max_combinations):
        plan = make_plan(block, scheme, cluster, reserve=reserve, include_embeddings=include_embeddings)
        if plan_fits(plan, cluster, reserve):
            plans.append(plan)
    if not plans:
        raise InfeasibleError(f"model {block.model.name if block.model else '?'} fits no scheme "
                              f"on {cluster.num_devices} x {cluster.device.name}")
    return plans


def baseline_plan(block: BlockSpec, cluster: ClusterSpec, reserve: float = 0.1,
                  include_embeddings: bool = True) -> ExecutionPlan:
    """Common heuristic: tensor parallel inside a node, pipeline across nodes."""
    stages = cluster.num_nodes
    scheme = build_scheme(block, 1, stages, [(1, "TP")] * len(block.cells), cluster.num_devices)
    return make_plan(block, scheme, cluster, reserve=reserve, include_embeddings=include_embeddings)


def plan_from_doc(doc: Mapping[str, Any], block: BlockSpec, cluster: ClusterSpec, reserve: float = 0.1,
                  include_embeddings: bool = True) -> ExecutionPlan:
    """Rebuild a plan from its JSON form (or a hand-written subset of it)."""
    from .cluster import DeviceAssignment

    try:
        model_dp = int(doc["model_dp"])
        stages = int(doc["num_stages"])
        cells = doc["cells"]
        choices = [(int(c.get("cell_dp", 1)), str(c.get("mode", "TP")).upper()) for c in cells]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ValueError(f"malformed plan document: {exc}") from None
    scheme = build_scheme(block, model_dp, stages, choices, cluster.num_devices)
    assignment = None
    if doc.get("assignment") is not None:
        phys = tuple(int(x) for x in doc["assignment"])
        if sorted(phys) != list(range(cluster.num_devices)):
            raise ValueError("plan assignment is not a permutation of the cluster's devices")
        assignment = DeviceAssignment(model_dp, stages, scheme.stage_devices, phys, cluster)
    return make_plan(block, scheme, cluster, assignment, reserve, include_embeddings)
