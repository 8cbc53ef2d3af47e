"""Request traces: JSONL / Azure-style CSV ingestion and Poisson synthesis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    id: str
    context_len: int
    gen_len: int
    arrival: float

    def __post_init__(self) -> None:
        if self.context_len < 1 or self.gen_len < 1:
            raise TraceError(f"request {self.id}: context_len and gen_len must be >= 1")
        if self.arrival < 0:
            raise TraceError(f"request {self.id}: negative arrival {self.arrival}")


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.requests, key=lambda r: r.arrival))
        object.__setattr__(self, "requests", ordered)
        ids = [r.id for r in ordered]
        if len(set(ids)) != len(ids):
            raise TraceError("duplicate request ids in trace")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def subset(self, n: int) -> "Trace":
        return Trace(self.requests[:n], dict(self.metadata, subset=n))


@dataclass(frozen=True)
class LengthDistribution:
    """Normal(mean, std) truncated below at ``minimum``, rounded to whole tokens."""

    mean: float
    std: float
    minimum: float = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.std == 0:
            return np.full(n, max(int(round(self.mean)), int(self.minimum)), dtype=np.int64)
        out = np.empty(n)
        filled = 0
        while filled < n:
            draw = rng.normal(self.mean, self.std, size=max(2 * (n - filled), 16))
            draw = draw[draw >= self.minimum][: n - filled]
            out[filled:filled + len(draw)] = draw
            filled += len(draw)
        return np.maximum(np.rint(out), self.minimum).astype(np.int64)


def _parse_time(value: str) -> float:
    value = value.strip()
    try:
        return float(value)
    except ValueError:
        pass
    if "." in value:
        head, frac = value.split(".", 1)
        digits = "".join(ch for ch in frac if ch.isdigit())
        value = f"{head}.{digits[:6]}"
    return datetime.fromisoformat(value).timestamp()


_AZURE_COLUMNS = {"timestamp": "arrival", "contexttokens": "context_len", "generatedtokens": "gen_len"}


def _load_csv(text: str) -> list[Request]:
    reader = csv.DictReader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return []
    colmap = {}
    for col in reader.fieldnames or []:
        key = col.strip().lower()
        if key in _AZURE_COLUMNS:
            colmap[_AZURE_COLUMNS[key]] = col
        elif key in ("arrival_s", "context_len", "gen_len", "id"):
            colmap[key if key != "arrival_s" else "arrival"] = col
    missing = {"arrival", "context_len", "gen_len"} - colmap.keys()
    if missing:
        raise TraceError(f"trace CSV missing columns for {sorted(missing)}")
    times = [_parse_time(row[colmap["arrival"]]) for row in rows]
    t0 = min(times)
    out = []
    for i, (row, t) in enumerate(zip(rows, times)):
        rid = row[colmap["id"]] if "id" in colmap else str(i)
        out.append(Request(rid, int(row[colmap["context_len"]]), int(row[colmap["gen_len"]]), t - t0))
    return out


def load_trace(doc: str | Path | io.TextIOBase, fmt: Optional[str] = None) -> Trace:
    """Read a trace file: JSONL ``{id, context_len, gen_len, arrival_s}`` or Azure CSV."""
    source = "stream"
    if isinstance(doc, (str, Path)):
        source = str(doc)
        text = Path(doc).read_text()
        if fmt is None and str(doc).endswith(".csv"):
            fmt = "csv"
    else:
        text = doc.read()
    if fmt is None:
        first = next((ln for ln in text.splitlines() if ln.strip()), "")
        fmt = "jsonl" if first.lstrip().startswith("{") or not first else "csv"
    try:
        if fmt == "csv":
            reqs = _load_csv(text)
        else:
            reqs = []
            for ln in text.splitlines():
                if not ln.strip():
                    continue
                rec = json.loads(ln)
                reqs.append(Request(str(rec["id"]), int(rec["context_len"]), int(rec["gen_len"]),
                                    float(rec.get("arrival_s", rec.get("arrival", 0.0)))))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, TraceError):
            raise
        raise TraceError(f"malformed trace: {exc}") from None
    return Trace(tuple(reqs), {"source": source})


def dump_trace(trace: Trace, fh) -> None:
    for r in trace.requests:
        fh.write(json.dumps({"id": r.id, "context_len": r.context_len, "gen_len": r.gen_len,
                             "arrival_s": r.arrival}) + "\n")


def synth_trace(ctx_dist: LengthDistribution, gen_dist: LengthDistribution, rate: float, n: int,
                seed: int, name: str = "synthetic") -> Trace:
    """Poisson arrivals at ``rate`` requests/s with truncated-normal lengths."""
    if rate <= 0:
        raise ValueError("arrival rate must be positive")
    if n < 0:
        raise ValueError("request count must be non-negative")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / rate, size=n))
    ctx = ctx_dist.sample(rng, n)
    gen = gen_dist.sample(rng, n)
    reqs = tuple(Request(str(i), int(c), int(g), float(a)) for i, (c, g, a) in enumerate(zip(ctx, gen, arrivals)))
    meta = {"name": name, "seed": seed, "source": "synthetic", "rate": rate,
            "length_family": "truncated_normal",
            "context": [ctx_dist.mean, ctx_dist.std], "generation": [gen_dist.mean, gen_dist.std]}
    return Trace(reqs, meta)


# Mean/std of context and generation lengths for the three evaluation workloads.
WORKLOADS = {
    "summarization": (LengthDistribution(2742.11, 944.33), LengthDistribution(172.22, 73.17), 1188),
    "creation": (LengthDistribution(306.82, 81.03), LengthDistribution(1128.34, 419.64), 512),
    "chat": (LengthDistribution(73.32, 148.65), LengthDistribution(189.47, 174.18), 1024),
}
