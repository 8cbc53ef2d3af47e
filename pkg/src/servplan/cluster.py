"""Tree-topology clusters and the logical-to-physical device mapper."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from .ir import ConfigError, parse_dtype

if TYPE_CHECKING:
    from .planner import ParallelScheme

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelSpec:
    fan_out: int
    link_bandwidth: float
    link_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.fan_out < 1:
            raise ConfigError(f"fan_out must be >= 1, got {self.fan_out}")
        if self.link_bandwidth <= 0:
            raise ConfigError("link_bandwidth must be positive")
        if self.link_latency < 0:
            raise ConfigError("link_latency must be non-negative")


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    memory_capacity: float
    peak_flops: Mapping[str, float]
    peak_mem_bandwidth: float
    frequency_options: tuple[float, ...] = (1.98,)
    power_watts: float = 700.0

    def __post_init__(self) -> None:
        if self.memory_capacity <= 0:
            raise ConfigError("device memory_capacity must be positive")
        if self.peak_mem_bandwidth <= 0:
            raise ConfigError("device peak_mem_bandwidth must be positive")
        if not self.frequency_options:
            raise ConfigError("device needs at least one frequency option")

    @property
    def max_frequency(self) -> float:
        return max(self.frequency_options)

    def flops(self, dtype: str) -> float:
        try:
            return self.peak_flops[dtype]
        except KeyError:
            raise ConfigError(f"device {self.name} has no peak_flops entry for {dtype}") from None


@dataclass(frozen=True)
class ClusterSpec:
    levels: tuple[LevelSpec, ...]
    device: DeviceSpec

    def __post_init__(self) -> None:
        if not self.levels:
            raise ConfigError("cluster needs at least one level")
        bws = [lv.link_bandwidth for lv in self.levels]
        if any(b > a for a, b in zip(bws, bws[1:])):
            logger.warning("cluster bandwidth increases with level: %s", bws)

    @property
    def num_devices(self) -> int:
        return math.prod(lv.fan_out for lv in self.levels)

    @property
    def devices_per_node(self) -> int:
        """Devices under one level-1 switch; a "node" is a level-1 subtree."""
        return self.levels[0].fan_out

    @property
    def num_nodes(self) -> int:
        return self.num_devices // self.devices_per_node

    def subtree_size(self, level: int) -> int:
        """Devices under one level-``level`` subtree (level 0 is a single device)."""
        return math.prod(lv.fan_out for lv in self.levels[:level])

    def subtree_of(self, device: int, level: int) -> int:
        return device // self.subtree_size(level)

    def level_between(self, a: int, b: int) -> int:
        """Lowest level whose subtree contains both devices (0 when a == b)."""
        for level in range(len(self.levels) + 1):
            if self.subtree_of(a, level) == self.subtree_of(b, level):
                return level
        raise AssertionError("devices outside cluster")

    def level_for_nodes(self, num_nodes: int) -> int:
        """Smallest level whose subtree holds ``num_nodes`` level-1 subtrees."""
        if num_nodes <= 1:
            return 1
        for level in range(2, len(self.levels) + 1):
            if self.subtree_size(level) // self.devices_per_node >= num_nodes:
                return level
        return len(self.levels)

    def bottleneck(self, num_nodes: int) -> LevelSpec:
        """Slowest link crossed by a collective spanning ``num_nodes`` nodes."""
        top = self.level_for_nodes(num_nodes)
        lowest = 1 if num_nodes <= 1 else 2
        links = self.levels[lowest - 1:top]
        bw = min(lv.link_bandwidth for lv in links)
        lat = max(lv.link_latency for lv in links)
        return LevelSpec(fan_out=1, link_bandwidth=bw, link_latency=lat)


def _load_doc(doc: Mapping[str, Any] | str | Path) -> Mapping[str, Any]:
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        return json.loads(Path(doc).read_text())
    if isinstance(doc, str):
        return json.loads(doc)
    return doc


def parse_cluster_spec(doc: Mapping[str, Any] | str | Path, required_dtypes: Iterable[str] = ()) -> ClusterSpec:
    doc = _load_doc(doc)
    try:
        levels = tuple(
            LevelSpec(
                fan_out=int(lv["fan_out"]),
                link_bandwidth=float(lv.get("link_bandwidth", lv.get("bw", 0.0))),
                link_latency=float(lv.get("link_latency", lv.get("latency", 0.0))),
            )
            for lv in doc["levels"]
        )
        dev = doc["device"]
        peak = {parse_dtype(k).name.lower(): float(v) for k, v in dev["peak_flops"].items()}
        device = DeviceSpec(
            name=str(dev.get("name", "device")),
            memory_capacity=float(dev["memory_capacity"]),
            peak_flops=peak,
            peak_mem_bandwidth=float(dev["peak_mem_bandwidth"]),
            frequency_options=tuple(sorted(float(f) for f in dev.get("frequency_options", [1.98]))),
            power_watts=float(dev.get("power_watts", 700.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"cluster spec missing key {exc}") from None
    cluster = ClusterSpec(levels=levels, device=device)
    if cluster.num_devices == 0:
        raise ConfigError("cluster has zero devices")
    for dt in required_dtypes:
        device.flops(dt)
    return cluster


def cluster_to_doc(cluster: ClusterSpec) -> dict[str, Any]:
    d = cluster.device
    return {
        "levels": [{"fan_out": lv.fan_out, "link_bandwidth": lv.link_bandwidth, "link_latency": lv.link_latency}
                   for lv in cluster.levels],
        "device": {
            "name": d.name,
            "memory_capacity": d.memory_capacity,
            "peak_flops": dict(d.peak_flops),
            "peak_mem_bandwidth": d.peak_mem_bandwidth,
            "frequency_options": list(d.frequency_options),
            "power_watts": d.power_watts,
        },
    }


# Logical role of one device inside a plan: (replica, stage, index within stage).
Role = tuple[int, int, int]


@dataclass(frozen=True)
class SpanStats:
    num_devices: int
    num_nodes_spanned: int
    highest_level_used: int


@dataclass(frozen=True)
class DeviceAssignment:
    """Bijective map from logical roles to physical device ids."""

    model_dp: int
    num_stages: int
    stage_devices: int
    physical: tuple[int, ...]  # indexed by flat logical id r*m + s*sd + j
    cluster: ClusterSpec = field(compare=False, repr=False)

    def logical_id(self, role: Role) -> int:
        r, s, j = role
        if not (0 <= r < self.model_dp and 0 <= s < self.num_stages and 0 <= j < self.stage_devices):
            raise KeyError(f"role {role} not in assignment")
        return (r * self.num_stages + s) * self.stage_devices + j

    def device(self, role: Role) -> int:
        return self.physical[self.logical_id(role)]

    def stage_roles(self, replica: int, stage: int) -> list[Role]:
        return [(replica, stage, j) for j in range(self.stage_devices)]

    def cell_groups(self, replica: int, stage: int, intra_degree: int) -> list[list[Role]]:
        """Intra-layer groups of a cell: contiguous blocks of the stage's devices."""
        return [[(replica, stage, g * intra_degree + k) for k in range(intra_degree)]
                for g in range(self.stage_devices // intra_degree)]

    def as_mapping(self) -> dict[Role, int]:
        return {(r, s, j): self.device((r, s, j))
                for r in range(self.model_dp) for s in range(self.num_stages) for j in range(self.stage_devices)}


def _take(cluster: ClusterSpec, pool: Sequence[int], k: int) -> list[int]:
    """Pick ``k`` devices from ``pool`` inside the smallest covering subtree.

    Ties go to the lowest-index subtree; inside the chosen subtree, children
    with the most free devices are consumed first so later groups keep whole
    subtrees where possible.
    """
    if k == len(pool):
        return list(pool)
    for level in range(len(cluster.levels) + 1):
        buckets: dict[int, list[int]] = {}
        for d in pool:
            buckets.setdefault(cluster.subtree_of(d, level), []).append(d)
        fits = [key for key in sorted(buckets) if len(buckets[key]) >= k]
        if fits:
            chosen = buckets[fits[0]]
            if level == 0 or len(chosen) == k:
                return chosen[:k]
            return _fill(cluster, chosen, k, level - 1)
    raise ValueError(f"cannot take {k} devices from pool of {len(pool)}")


def _fill(cluster: ClusterSpec, pool: list[int], k: int, child_level: int) -> list[int]:
    children: dict[int, list[int]] = {}
    for d in pool:
        children.setdefault(cluster.subtree_of(d, child_level), []).append(d)
    order = sorted(children, key=lambda c: (-len(children[c]), c))
    out: list[int] = []
    for c in order:
        need = k - len(out)
        if need == 0:
            break
        devs = children[c]
        if len(devs) <= need:
            out.extend(devs)
        else:
            out.extend(_take(cluster, devs, need))
    return sorted(out)


def map_devices(scheme: "ParallelScheme", cluster: ClusterSpec) -> DeviceAssignment:
    """Bottom-up placement: cell groups, then stages, then replicas share the lowest subtrees."""
    n = cluster.num_devices
    if scheme.num_devices != n:
        raise ValueError(f"scheme needs {scheme.num_devices} devices, cluster has {n}")
    m = n // scheme.model_dp
    sd = scheme.stage_devices
    unit = scheme.primary_intra_degree
    physical: list[int] = []
    free = list(range(n))
    for _r in range(scheme.model_dp):
        rep = _take(cluster, free, m)
        free = [d for d in free if d not in set(rep)]
        for _s in range(scheme.num_stages):
            stage = _take(cluster, rep, sd)
            rep = [d for d in rep if d not in set(stage)]
            for _g in range(sd // unit):
                group = _take(cluster, stage, unit)
                stage = [d for d in stage if d not in set(group)]
                physical.extend(group)
    assert sorted(physical) == list(range(n))
    return DeviceAssignment(scheme.model_dp, scheme.num_stages, sd, tuple(physical), cluster)


def identity_assignment(model_dp: int, num_stages: int, stage_devices: int, cluster: ClusterSpec) -> DeviceAssignment:
    return DeviceAssignment(model_dp, num_stages, stage_devices,
                            tuple(range(model_dp * num_stages * stage_devices)), cluster)


def collective_span(assignment: DeviceAssignment, group: Iterable[Role]) -> SpanStats:
    devices = sorted({assignment.device(role) for role in group})
    if not devices:
        raise ValueError("collective group is empty")
    cluster = assignment.cluster
    nodes = {cluster.subtree_of(d, 1) for d in devices}
    level = max((cluster.level_between(devices[0], d) for d in devices[1:]), default=0)
    return SpanStats(num_devices=len(devices), num_nodes_spanned=len(nodes), highest_level_used=level)
