"""Iteration-level batching with greedy admission and LIFO eviction.

The state functions mutate the ``BatchState`` they are given and return it,
so they compose as ``state = admit(state, policy)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Optional

from .traces import Request

PREFILL = "prefill"
DECODE = "decode"


@dataclass(frozen=True)
class BatchPolicy:
    mode: str = "contiguous"  # "contiguous" or "chunked"
    chunk_size: int = 512
    max_batch_size: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in ("contiguous", "chunked"):
            raise ValueError(f"unknown batching mode {self.mode!r}")
        if self.mode == "chunked" and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.max_batch_size is not None and self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")


@dataclass
class ActiveRequest:
    request: Request
    phase: str = PREFILL
    tokens_generated: int = 0
    prefill_done: int = 0
    prefill_chunks_done: int = 0
    admitted_at: float = 0.0
    first_token_time: Optional[float] = None


@dataclass(frozen=True)
class IterationWorkload:
    prefill_items: tuple[tuple[str, int], ...]
    decode_count: int

    @property
    def batch_size(self) -> int:
        return len(self.prefill_items) + self.decode_count

    @property
    def total_tokens(self) -> int:
        return sum(t for _, t in self.prefill_items) + self.decode_count


@dataclass
class Completion:
    request: Request
    first_token_time: float
    finish_time: float
    admitted_at: float
    output_tokens: int = 0  # tokens of the run that finished; earlier evicted runs excluded


@dataclass
class BatchState:
    pending: Deque[Request]
    memory_capacity: float
    kv_bytes_per_token: float
    active: list[ActiveRequest] = field(default_factory=list)
    clock: float = 0.0
    completed: list[Completion] = field(default_factory=list)
    rejected: list[Request] = field(default_factory=list)
    evictions: int = 0
    # tokens produced per request id, including ones discarded by eviction
    tokens_produced: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_requests(cls, requests, memory_capacity: float, kv_bytes_per_token: float) -> "BatchState":
        return cls(deque(sorted(requests, key=lambda r: r.arrival)), memory_capacity, kv_bytes_per_token)

    def kv_bytes(self, ar: ActiveRequest) -> float:
        return (ar.request.context_len + ar.tokens_generated) * self.kv_bytes_per_token

    @property
    def memory_used(self) -> float:
        return sum(self.kv_bytes(ar) for ar in self.active)

    @property
    def done(self) -> bool:
        return not self.pending and not self.active


def admit(state: BatchState, policy: BatchPolicy) -> BatchState:
    """Admit arrived requests in arrival order while their prompt KV fits.

    Admission is strictly FIFO: it stops at the first arrived request that
    does not fit. A request whose prompt alone exceeds the whole budget is
    rejected outright.
    """
    used = state.memory_used
    cap = policy.max_batch_size
    while state.pending and state.pending[0].arrival <= state.clock:
        req = state.pending[0]
        need = req.context_len * state.kv_bytes_per_token
        if need > state.memory_capacity:
            state.pending.popleft()
            state.rejected.append(req)
            continue
        if cap is not None and len(state.active) >= cap:
            break
        if used + need > state.memory_capacity:
            break
        state.pending.popleft()
        state.active.append(ActiveRequest(req, admitted_at=state.clock))
        used += need
    return state


def plan_iteration(state: BatchState, policy: BatchPolicy) -> IterationWorkload:
    items = []
    decode = 0
    for ar in state.active:
        if ar.phase == PREFILL:
            remaining = ar.request.context_len - ar.prefill_done
            tokens = remaining if policy.mode == "contiguous" else min(policy.chunk_size, remaining)
            items.append((ar.request.id, tokens))
        else:
            decode += 1
    return IterationWorkload(tuple(items), decode)


def step(state: BatchState, policy: BatchPolicy,
         iteration_cost: Callable[[IterationWorkload], float] = lambda w: 0.0) -> tuple[IterationWorkload, BatchState]:
    """Run one iteration: build the workload, advance the clock, account tokens.

    ``iteration_cost`` maps the workload to its duration in seconds. Prompt
    completion produces the first output token in the same iteration.
    """
    work = plan_iteration(state, policy)
    state.clock += iteration_cost(work)
    now = state.clock
    prefill_tokens = dict(work.prefill_items)
    survivors = []
    for ar in state.active:
        rid = ar.request.id
        if ar.phase == PREFILL:
            ar.prefill_done += prefill_tokens[rid]
            ar.prefill_chunks_done += 1
            if ar.prefill_done >= ar.request.context_len:
                ar.phase = DECODE
                ar.tokens_generated = 1
                ar.first_token_time = now
                state.tokens_produced[rid] = state.tokens_produced.get(rid, 0) + 1
        else:
            ar.tokens_generated += 1
            state.tokens_produced[rid] = state.tokens_produced.get(rid, 0) + 1
        if ar.phase == DECODE and ar.tokens_generated >= ar.request.gen_len:
            state.completed.append(Completion(ar.request, ar.first_token_time, now, ar.admitted_at,
                                               ar.tokens_generated))
        else:
            survivors.append(ar)
    state.active = survivors
    return work, state


def evict_on_overflow(state: BatchState) -> BatchState:
    """Drop the most recently admitted requests until the KV ledger fits.

    Evicted requests lose all progress and go back to the head of the queue.
    A request that overflows while alone can never finish and is rejected.
    """
    used = state.memory_used
    if used <= state.memory_capacity:
        return state
    evicted = []
    while used > state.memory_capacity and state.active:
        ar = state.active.pop()
        used -= state.kv_bytes(ar)
        if not state.active:
            state.rejected.append(ar.request)
        else:
            evicted.append(ar.request)
    state.evictions += len(evicted)
    for req in sorted(evicted, key=lambda r: r.arrival, reverse=True):
        state.pending.appendleft(req)
    return state


def skip_idle(state: BatchState) -> BatchState:
    """Jump the clock to the next arrival when nothing is running."""
    if not state.active and state.pending and state.pending[0].arrival > state.clock:
        state.clock = state.pending[0].arrival
    return state


def run_batching(state: BatchState, policy: BatchPolicy,
                 iteration_cost: Callable[[IterationWorkload], float],
                 on_iteration: Optional[Callable[[float, IterationWorkload, BatchState], None]] = None) -> BatchState:
    """Drive admission/step/eviction until every request completes or is rejected."""
    while not state.done:
        skip_idle(state)
        admit(state, policy)
        if not state.active:
            continue
        start = state.clock
        work, state = step(state, policy, iteration_cost)
        evict_on_overflow(state)
        if on_iteration is not None:
            on_iteration(start, work, state)
    return state
