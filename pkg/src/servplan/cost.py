"""Operation-level profile tables and interpolated time/energy lookups.

Profile files are JSONL, one table entry per line::

    {"table": "compute", "op": "gemm", "dtype": "fp16", "freq_ghz": 1.98,
     "axes": {"tokens": 64, "n": 8192, "k": 8192}, "seconds": ..., "joules": ...}
    {"table": "collective", "op": "AllReduce", "dtype": null, "freq_ghz": null,
     "axes": {"payload_bytes": 1048576, "num_devices": 8, "num_nodes": 1}, ...}

Compute tables are keyed by (op, dtype, freq_ghz) and form a full
rectilinear grid over the op's axes. Collective tables are keyed by
(op, num_devices, num_nodes) and are 1-D over payload_bytes.
"""

from __future__ import annotations

import bisect
import io
import json
import math
import threading
import warnings
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

from .cluster import ClusterSpec, DeviceSpec
from .ir import ModelSpec, to_transformer_ir

COMPUTE_AXES: dict[str, tuple[str, ...]] = {
    # core attention (scores + context) for `heads` heads of width head_dim
    "attention": ("tokens", "heads", "head_dim"),
    # dense [tokens, k] x [k, n]
    "gemm": ("tokens", "n", "k"),
    # `experts` independent [.., k] x [k, n] weights; tokens = routed token-expert pairs
    "moe_gemm": ("tokens", "experts", "n", "k"),
}
COLLECTIVE_KINDS = ("AllReduce", "AllGather", "ReduceScatter", "AllToAll", "P2P")


class ProfileError(ValueError):
    pass


class MissingTableError(KeyError):
    pass


class ProfileRangeWarning(UserWarning):
    """A query fell outside a table's grid and was clamped to the boundary."""


@dataclass(frozen=True)
class OpQuery:
    op: str
    dtype: str
    freq: float
    dims: tuple[float, ...]  # ordered per COMPUTE_AXES[op]


@dataclass(frozen=True)
class CollectiveQuery:
    kind: str
    payload_bytes: float
    num_devices: int
    num_nodes: int


Query = Union[OpQuery, CollectiveQuery]


def op_flops(op: str, dims: Sequence[float]) -> float:
    if op == "attention":
        t, h, d = dims
        return 4.0 * t * t * h * d
    if op == "gemm":
        t, n, k = dims
        return 2.0 * t * n * k
    if op == "moe_gemm":
        t, _e, n, k = dims
        return 2.0 * t * n * k
    raise ProfileError(f"unknown op {op!r}")


def op_bytes(op: str, dims: Sequence[float], elem_bytes: float) -> float:
    """Bytes moved to/from device memory, all elements in one format."""
    if op == "attention":
        t, h, d = dims
        return 4.0 * t * h * d * elem_bytes
    if op == "gemm":
        t, n, k = dims
        return (n * k + t * k + t * n) * elem_bytes
    if op == "moe_gemm":
        t, e, n, k = dims
        return (e * n * k + t * k + t * n) * elem_bytes
    raise ProfileError(f"unknown op {op!r}")


@dataclass
class GridTable:
    axes: tuple[str, ...]
    knots: tuple[tuple[float, ...], ...]
    seconds: list[float]  # row-major over knots
    joules: list[float]

    def __post_init__(self) -> None:
        self._strides = []
        stride = 1
        for ks in reversed(self.knots):
            self._strides.append(stride)
            stride *= len(ks)
        self._strides.reverse()

    def lookup(self, point: Sequence[float]) -> tuple[float, float, list[tuple[int, str]]]:
        """Multilinear interpolation; returns (seconds, joules, clamp events)."""
        clamps: list[tuple[int, str]] = []
        corners: list[tuple[int, int, float]] = []
        for ax, (ks, x) in enumerate(zip(self.knots, point)):
            if x <= ks[0]:
                if x < ks[0]:
                    clamps.append((ax, "low"))
                corners.append((0, 0, 0.0))
            elif x >= ks[-1]:
                if x > ks[-1]:
                    clamps.append((ax, "high"))
                corners.append((len(ks) - 1, len(ks) - 1, 0.0))
            else:
                i = bisect.bisect_right(ks, x) - 1
                if ks[i] == x:
                    corners.append((i, i, 0.0))
                else:
                    corners.append((i, i + 1, (x - ks[i]) / (ks[i + 1] - ks[i])))
        sec = 0.0
        jou = 0.0
        active = [(ax, c) for ax, c in enumerate(corners) if c[2] != 0.0]
        base = sum(self._strides[ax] * c[0] for ax, c in enumerate(corners))
        if not active:
            return self.seconds[base], self.joules[base], clamps
        for bits in product((0, 1), repeat=len(active)):
            w = 1.0
            idx = base
            for bit, (ax, (_i0, _i1, t)) in zip(bits, active):
                if bit:
                    w *= t
                    idx += self._strides[ax]
                else:
                    w *= 1.0 - t
            sec += w * self.seconds[idx]
            jou += w * self.joules[idx]
        return sec, jou, clamps


def _finite_nonneg(x: Any, what: str) -> float:
    v = float(x)
    if not math.isfinite(v) or v < 0:
        raise ProfileError(f"{what} must be finite and non-negative, got {x!r}")
    return v


class ProfileStore:
    """Immutable set of profile tables with interpolating queries.

    Clamped queries warn once per (table, direction); the dedup set is the
    only mutable state and is guarded by a lock.
    """

    def __init__(self, compute: Mapping[tuple, GridTable], collective: Mapping[tuple, GridTable],
                 records: list[dict] | None = None):
        self.compute = dict(compute)
        self.collective = dict(collective)
        self._records = records
        self._warned: set[tuple] = set()
        self._lock = threading.Lock()
        self._cache: dict[Query, tuple[float, float]] = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def clamp_warnings(self) -> frozenset:
        return frozenset(self._warned)

    def _table_for(self, q: Query) -> tuple[tuple, GridTable, tuple[float, ...]]:
        if isinstance(q, OpQuery):
            key = ("compute", q.op, q.dtype, float(q.freq))
            table = self.compute.get(key[1:])
            point = tuple(q.dims)
        else:
            key = ("collective", q.kind, int(q.num_devices), int(q.num_nodes))
            table = self.collective.get(key[1:])
            point = (float(q.payload_bytes),)
        if table is None:
            raise MissingTableError(f"no profile table for {key}")
        return key, table, point

    def lookup(self, q: Query) -> tuple[float, float]:
        hit = self._cache.get(q)
        if hit is not None:
            return hit
        key, table, point = self._table_for(q)
        sec, jou, clamps = table.lookup(point)
        for _ax, direction in clamps:
            tag = (key, direction)
            with self._lock:
                fresh = tag not in self._warned
                self._warned.add(tag)
            if fresh:
                warnings.warn(f"query {point} outside grid of {key}; clamped ({direction})",
                              ProfileRangeWarning, stacklevel=3)
        self._cache[q] = (sec, jou)
        return sec, jou

    def records(self) -> list[dict]:
        if self._records is None:
            self._records = list(_records_from_tables(self))
        return self._records

    def map_records(self, fn) -> "ProfileStore":
        """New store from records transformed by ``fn(record) -> record``."""
        return from_records(fn(dict(r, axes=dict(r["axes"]))) for r in self.records())


def query_time(store: ProfileStore, q: Query) -> float:
    return store.lookup(q)[0]


def query_energy(store: ProfileStore, q: Query) -> float:
    return store.lookup(q)[1]


def _build_grid(key: tuple, axes: tuple[str, ...], entries: list[tuple[tuple[float, ...], float, float]]) -> GridTable:
    knots = tuple(tuple(sorted({e[0][i] for e in entries})) for i in range(len(axes)))
    size = math.prod(len(k) for k in knots)
    if len(entries) != size:
        raise ProfileError(f"table {key} is not a full grid: {len(entries)} entries for {size} grid points")
    index = [{v: i for i, v in enumerate(ks)} for ks in knots]
    strides = []
    stride = 1
    for ks in reversed(knots):
        strides.append(stride)
        stride *= len(ks)
    strides.reverse()
    sec = [math.nan] * size
    jou = [math.nan] * size
    for point, s, j in entries:
        flat = sum(strides[i] * index[i][v] for i, v in enumerate(point))
        if not math.isnan(sec[flat]):
            raise ProfileError(f"duplicate knot {point} in table {key}")
        sec[flat] = s
        jou[flat] = j
    return GridTable(axes=axes, knots=knots, seconds=sec, joules=jou)


def from_records(records: Iterable[Mapping[str, Any]]) -> ProfileStore:
    compute: dict[tuple, list] = {}
    collective: dict[tuple, list] = {}
    kept: list[dict] = []
    for lineno, rec in enumerate(records, 1):
        try:
            axes = rec["axes"]
            sec = _finite_nonneg(rec["seconds"], "seconds")
            jou = _finite_nonneg(rec["joules"], "joules")
            if rec["table"] == "compute":
                op = rec["op"]
                if op not in COMPUTE_AXES:
                    raise ProfileError(f"unknown compute op {op!r}")
                names = COMPUTE_AXES[op]
                point = tuple(float(axes[a]) for a in names)
                key = (op, str(rec["dtype"]), float(rec["freq_ghz"]))
                compute.setdefault(key, []).append((point, sec, jou))
            elif rec["table"] == "collective":
                kind = rec["op"]
                if kind not in COLLECTIVE_KINDS:
                    raise ProfileError(f"unknown collective {kind!r}")
                key = (kind, int(axes["num_devices"]), int(axes["num_nodes"]))
                collective.setdefault(key, []).append(((float(axes["payload_bytes"]),), sec, jou))
            else:
                raise ProfileError(f"unknown table type {rec['table']!r}")
        except KeyError as exc:
            raise ProfileError(f"record {lineno}: missing field {exc}") from None
        except ProfileError as exc:
            raise ProfileError(f"record {lineno}: {exc}") from None
        kept.append(dict(rec))
    ctables = {k: _build_grid(k, COMPUTE_AXES[k[0]], v) for k, v in compute.items()}
    xtables = {k: _build_grid(k, ("payload_bytes",), v) for k, v in collective.items()}
    if not ctables and not xtables:
        raise ProfileError("profile document has no tables")
    return ProfileStore(ctables, xtables, kept)


def load_profiles(doc: str | Path | io.TextIOBase) -> ProfileStore:
    """Load a JSONL profile document from a path or open text stream."""
    if isinstance(doc, (str, Path)):
        with open(doc) as fh:
            lines = fh.read().splitlines()
    else:
        lines = doc.read().splitlines()
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise ProfileError(f"malformed profile line: {exc}") from None
    return from_records(records)


def _records_from_tables(store: ProfileStore) -> Iterator[dict]:
    for (op, dtype, freq), t in store.compute.items():
        for point in product(*t.knots):
            sec, jou, _ = t.lookup(point)
            yield {"table": "compute", "op": op, "dtype": dtype, "freq_ghz": freq,
                   "axes": dict(zip(t.axes, point)), "seconds": sec, "joules": jou}
    for (kind, nd, nn), t in store.collective.items():
        for (p,) in product(*t.knots):
            sec, jou, _ = t.lookup((p,))
            yield {"table": "collective", "op": kind, "dtype": None, "freq_ghz": None,
                   "axes": {"payload_bytes": p, "num_devices": nd, "num_nodes": nn},
                   "seconds": sec, "joules": jou}


def dump_profiles(store: ProfileStore, fh) -> None:
    for rec in store.records():
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _num(x: float) -> float | int:
    """Integral knots serialize as ints so files stay compact and stable."""
    return int(x) if float(x).is_integer() else float(x)


@dataclass
class GridSpec:
    """Knot lists for synthetic profile generation."""

    tokens: tuple[float, ...] = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768)
    dtypes: tuple[str, ...] = ("fp16",)
    frequencies: tuple[float, ...] | None = None  # defaults to the device's options
    attention_heads: tuple[float, ...] = (1, 2, 4, 8, 16, 32, 64, 128)
    head_dims: tuple[float, ...] = (64, 128)
    gemm_n: tuple[float, ...] = (1024, 4096, 8192)
    gemm_k: tuple[float, ...] = (1024, 4096, 8192)
    moe_experts: tuple[float, ...] = ()
    moe_n: tuple[float, ...] = ()
    moe_k: tuple[float, ...] = ()
    payload_bytes: tuple[float, ...] = (0.0,) + tuple(float(4 ** p) for p in range(4, 18))
    collective_kinds: tuple[str, ...] = COLLECTIVE_KINDS
    comm_power_fraction: float = 0.3

    @classmethod
    def for_model(cls, model: ModelSpec, max_devices: int, **overrides) -> "GridSpec":
        """Grid whose width axes hit every per-device shape the planner can produce."""
        from .planner import cell_op_shapes

        block = to_transformer_ir(model)
        heads, hdims, ns, ks = set(), {model.head_dim}, set(), set()
        mexp, mn, mk = set(), set(), set()
        for cell in block.cells:
            for shape in cell_op_shapes(cell, max_devices):
                op, dims = shape
                if op == "attention":
                    heads.add(dims[0])
                    hdims.add(dims[1])
                elif op == "gemm":
                    ns.add(dims[0])
                    ks.add(dims[1])
                else:
                    mexp.add(dims[0])
                    mn.add(dims[1])
                    mk.add(dims[2])
        dtypes = sorted({model.weight_dtype.name.lower(), model.activation_dtype.name.lower()})
        params = dict(attention_heads=tuple(sorted(heads)), head_dims=tuple(sorted(hdims)),
                      gemm_n=tuple(sorted(ns)), gemm_k=tuple(sorted(ks)),
                      moe_experts=tuple(sorted(mexp)), moe_n=tuple(sorted(mn)), moe_k=tuple(sorted(mk)),
                      dtypes=tuple(dtypes))
        params.update(overrides)
        return cls(**params)


def collective_factor(kind: str, devices: int) -> float:
    """Fraction of the payload each device must move over its link."""
    d = devices
    if kind == "AllReduce":
        return 2.0 * (d - 1) / d
    if kind in ("AllGather", "ReduceScatter", "AllToAll"):
        return (d - 1) / d
    if kind == "P2P":
        return 1.0
    raise ProfileError(f"unknown collective {kind!r}")


def power_at(device: DeviceSpec, freq: float) -> float:
    """Cube-law dynamic power anchored at nameplate power at max frequency."""
    return device.power_watts * (freq / device.max_frequency) ** 3


def roofline_seconds(device: DeviceSpec, op: str, dims: Sequence[float], dtype: str, freq: float) -> float:
    from .ir import parse_dtype

    elem = parse_dtype(dtype).bytes_per_element
    compute = op_flops(op, dims) / (device.flops(dtype) * freq / device.max_frequency)
    memory = op_bytes(op, dims, elem) / device.peak_mem_bandwidth
    return max(compute, memory)


def collective_seconds(cluster: ClusterSpec, kind: str, payload: float, devices: int, nodes: int) -> float:
    link = cluster.bottleneck(nodes)
    steps = 1 if kind == "P2P" else 2 * (devices - 1) if kind == "AllReduce" else devices - 1
    return steps * link.link_latency + payload * collective_factor(kind, devices) / link.link_bandwidth


def collective_shapes(cluster: ClusterSpec) -> list[tuple[int, int]]:
    """Every (num_devices, num_nodes) a group of >= 2 devices can span."""
    per_node = cluster.devices_per_node
    nodes = cluster.num_nodes
    out = []
    for d in range(2, cluster.num_devices + 1):
        lo = math.ceil(d / per_node)
        for k in range(lo, min(d, nodes) + 1):
            out.append((d, k))
    return out


def synth_profiles(hw: DeviceSpec, net: ClusterSpec, grid: GridSpec) -> ProfileStore:
    """Analytical roofline profiles in the same format as measured ones."""
    records: list[dict] = []
    freqs = grid.frequencies or hw.frequency_options
    op_grids = {
        "attention": (grid.tokens, grid.attention_heads, grid.head_dims),
        "gemm": (grid.tokens, grid.gemm_n, grid.gemm_k),
        "moe_gemm": (grid.tokens, grid.moe_experts, grid.moe_n, grid.moe_k),
    }
    for dtype in grid.dtypes:
        for freq in freqs:
            watts = power_at(hw, freq)
            for op, knots in op_grids.items():
                if any(len(k) == 0 for k in knots):
                    continue
                for point in product(*knots):
                    sec = roofline_seconds(hw, op, point, dtype, freq)
                    records.append({
                        "table": "compute", "op": op, "dtype": dtype, "freq_ghz": _num(freq),
                        "axes": {a: _num(v) for a, v in zip(COMPUTE_AXES[op], point)},
                        "seconds": sec, "joules": sec * watts,
                    })
    comm_watts = hw.power_watts * grid.comm_power_fraction
    for kind in grid.collective_kinds:
        for devices, nodes in collective_shapes(net):
            if kind == "P2P" and devices != 2:
                continue
            for payload in grid.payload_bytes:
                sec = collective_seconds(net, kind, payload, devices, nodes)
                records.append({
                    "table": "collective", "op": kind, "dtype": None, "freq_ghz": None,
                    "axes": {"payload_bytes": _num(payload), "num_devices": devices, "num_nodes": nodes},
                    "seconds": sec, "joules": sec * devices * comm_watts,
                })
    return from_records(records)


def kv_bytes_per_token(model: ModelSpec) -> float:
    return 2.0 * model.num_layers * model.num_kv_heads * model.head_dim * model.kv_cache_dtype.bytes_per_element
