import math

import pytest

from servplan.batching import BatchPolicy, IterationWorkload
from servplan.cluster import parse_cluster_spec
from servplan.cost import GridSpec, synth_profiles
from servplan.ir import parse_model_config, to_transformer_ir
from servplan.planner import InfeasibleError, build_scheme, generate_plans, make_plan
from servplan.simulator import (SimConfig, iteration_time, search, simulate_plan, split_tokens, split_trace,
                                sweep_max_batch)
from servplan.traces import LengthDistribution, Request, Trace, synth_trace

from conftest import TINY, cluster_doc
from oracles import naive_simulate

A = 1e-3  # seconds per compute op call
J = 0.5  # joules per compute op call
B = 2e-4  # seconds per collective call
JB = 0.1


def constant_store(cluster, model):
    base = synth_profiles(cluster.device, cluster, GridSpec.for_model(model, cluster.num_devices))

    def flat(r):
        if r["table"] == "compute":
            return dict(r, seconds=A, joules=J)
        return dict(r, seconds=B, joules=JB)

    return base.map_records(flat)


@pytest.fixture
def one_device():
    model = parse_model_config(TINY)
    cluster = parse_cluster_spec(cluster_doc((1,), memory_capacity=2e9))
    block = to_transformer_ir(model)
    plan = make_plan(block, build_scheme(block, 1, 1, [(1, "TP"), (1, "TP")], 1), cluster)
    return plan, constant_store(cluster, model)


def test_single_request_hand_computed(one_device):
    plan, store = one_device
    trace = Trace((Request("r", 100, 3, 0.0),))
    rep = simulate_plan(plan, trace, store)
    per_iter = 4 * 5 * A  # 4 layers x (3 attention ops + 2 ffn ops)
    assert rep.e2e_latency == pytest.approx(3 * per_iter)
    assert rep.ttft["r"] == pytest.approx(per_iter)
    assert rep.tpot["r"] == pytest.approx(per_iter)
    assert rep.total_energy == pytest.approx(3 * 20 * J)
    assert rep.num_iterations == 3


def test_gen_len_one_has_no_tpot(one_device):
    plan, store = one_device
    rep = simulate_plan(plan, Trace((Request("r", 10, 1, 0.0),)), store)
    assert rep.tpot == {} and rep.completed == 1


def test_ttft_anchor_admission(one_device):
    plan, store = one_device
    trace = Trace((Request("a", 10, 2, 0.0), Request("b", 10, 2, 0.0)))
    cfg = SimConfig(policy=BatchPolicy(max_batch_size=1), ttft_anchor="admission")
    rep = simulate_plan(plan, trace, store, cfg)
    assert rep.ttft["b"] == pytest.approx(20 * A)
    rep2 = simulate_plan(plan, trace, store, SimConfig(policy=BatchPolicy(max_batch_size=1)))
    assert rep2.ttft["b"] == pytest.approx(3 * 20 * A)


def test_empty_trace(one_device):
    plan, store = one_device
    rep = simulate_plan(plan, Trace(()), store)
    assert (rep.e2e_latency, rep.total_energy, rep.mfu, rep.p95_latency) == (0.0, 0.0, 0.0, 0.0)


def test_stage_time_is_max_and_energy_is_sum():
    model = parse_model_config(TINY)
    cluster = parse_cluster_spec(cluster_doc((2,), memory_capacity=2e9))
    block = to_transformer_ir(model)
    store = constant_store(cluster, model)
    plan = make_plan(block, build_scheme(block, 1, 2, [(1, "TP"), (1, "TP")], 2), cluster)
    secs, joules = iteration_time(plan, IterationWorkload((("r", 16),), 0), store, 2.0)
    # two layers per stage; the first stage also sends activations forward
    assert secs == pytest.approx([10 * A + B, 10 * A])
    assert joules == pytest.approx([10 * J + JB, 10 * J])
    rep = simulate_plan(plan, Trace((Request("r", 16, 1, 0.0),)), store)
    assert rep.e2e_latency == pytest.approx(max(secs))
    assert rep.total_energy == pytest.approx(sum(joules))


def test_tensor_parallel_collectives_counted():
    model = parse_model_config(TINY)
    cluster = parse_cluster_spec(cluster_doc((2,), memory_capacity=2e9))
    block = to_transformer_ir(model)
    store = constant_store(cluster, model)
    plan = make_plan(block, build_scheme(block, 1, 1, [(1, "TP"), (1, "TP")], 2), cluster)
    secs, joules = iteration_time(plan, IterationWorkload((), 3), store, 2.0)
    # per layer: 5 op calls on each device, 2 AllReduces
    assert secs == pytest.approx([4 * (5 * A + 2 * B)])
    assert joules == pytest.approx([4 * (2 * 5 * J + 2 * JB)])


def test_split_tokens_balances():
    w = IterationWorkload((("a", 100), ("b", 10), ("c", 50)), 5)
    loads = split_tokens(w, 2)
    assert loads == [([10, 50], 3), ([100], 2)]
    assert sum(sum(i) + d for i, d in loads) == w.total_tokens
    assert split_tokens(w, 1) == [([100, 10, 50], 5)]


def test_split_trace_round_robin():
    reqs = tuple(Request(str(i), 1, 1, float(i)) for i in range(5))
    parts = split_trace(Trace(reqs), 2)
    assert [[r.id for r in p] for p in parts] == [["0", "2", "4"], ["1", "3"]]


def test_data_parallel_replicas_run_independently():
    model = parse_model_config(TINY)
    cluster = parse_cluster_spec(cluster_doc((2,), memory_capacity=2e9))
    block = to_transformer_ir(model)
    store = constant_store(cluster, model)
    dp2 = make_plan(block, build_scheme(block, 2, 1, [(1, "TP"), (1, "TP")], 2), cluster)
    trace = Trace(tuple(Request(str(i), 10, 4, 0.0) for i in range(4)))
    rep = simulate_plan(dp2, trace, store)
    # per replica: one prefill iteration costing two prompts, then 3 decode iterations
    assert rep.e2e_latency == pytest.approx((2 * 20 + 3 * 20) * A)
    assert rep.total_energy == pytest.approx(2 * (2 * 20 + 3 * 20) * J)


def test_no_kv_room_is_infeasible(one_device):
    plan, store = one_device
    from dataclasses import replace
    broke = replace(plan, kv_capacity_bytes=0.0)
    with pytest.raises(InfeasibleError):
        simulate_plan(broke, Trace((Request("r", 1, 1, 0.0),)), store)


def test_matches_naive_oracle(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = synth_trace(LengthDistribution(80, 40), LengthDistribution(12, 6), 50.0, 40, seed=5)
    for plan in generate_plans(block, cluster)[::3]:
        for policy in (BatchPolicy(), BatchPolicy("chunked", 32)):
            rep = simulate_plan(plan, trace, store, SimConfig(policy=policy, frequency=1.6))
            e2e, energy = naive_simulate(plan, trace, store, policy, 1.6)
            assert rep.e2e_latency == pytest.approx(e2e, rel=1e-9)
            assert rep.total_energy == pytest.approx(energy, rel=1e-9)


def test_utilization_bounded_and_deterministic(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = synth_trace(LengthDistribution(200, 50), LengthDistribution(20, 5), 100.0, 60, seed=9)
    for plan in generate_plans(block, cluster)[:6]:
        a = simulate_plan(plan, trace, store)
        b = simulate_plan(plan, trace, store)
        assert a.to_doc() == b.to_doc()
        assert 0 < a.mfu <= 1 and 0 < a.mbu <= 1
        assert a.p95_latency <= max(a.latency.values())


def test_lower_frequency_trades_time_for_energy(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = synth_trace(LengthDistribution(2000, 100), LengthDistribution(8, 2), 100.0, 30, seed=1)
    plan = generate_plans(block, cluster)[0]
    hi = simulate_plan(plan, trace, store, SimConfig(frequency=2.0))
    lo = simulate_plan(plan, trace, store, SimConfig(frequency=0.8))
    assert lo.e2e_latency >= hi.e2e_latency and lo.total_energy < hi.total_energy


def test_search_ranks_by_objective(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = synth_trace(LengthDistribution(100, 30), LengthDistribution(10, 3), 100.0, 30, seed=2)
    plans = generate_plans(block, cluster)
    lat = search(plans, trace, store, "latency", [1.2, 2.0], workers=1)
    assert len(lat) == 2 * len(plans)
    keys = [(e.report.e2e_latency, e.report.total_energy) for e in lat]
    assert keys == sorted(keys)
    en = search(plans, trace, store, "energy", [1.2, 2.0], workers=1)
    assert [e.report.total_energy for e in en] == sorted(e.report.total_energy for e in en)
    with pytest.raises(ValueError):
        search(plans, trace, store, "throughput")
    with pytest.raises(InfeasibleError):
        search([], trace, store)


def test_search_worker_count_does_not_change_ranking(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = synth_trace(LengthDistribution(100, 30), LengthDistribution(10, 3), 100.0, 20, seed=4)
    plans = generate_plans(block, cluster)[:5]
    one = search(plans, trace, store, "energy", [1.6, 2.0], workers=1)
    two = search(plans, trace, store, "energy", [1.6, 2.0], workers=2)
    assert [(e.plan.encoding, e.frequency, e.report.to_doc()) for e in one] == \
           [(e.plan.encoding, e.frequency, e.report.to_doc()) for e in two]


def test_sweep_caps_and_monotone_batches(tiny_setup):
    model, block, cluster, store = tiny_setup
    trace = Trace(tuple(Request(str(i), 20, 30, 0.0) for i in range(40)))
    plan = generate_plans(block, cluster)[0]
    m = simulate_plan(plan, trace, store).max_batch_size
    rows = sweep_max_batch(plan, trace, store, 4)
    assert [r.max_batch_size for r in rows] == [max(1, math.ceil(i * m / 4)) for i in range(1, 5)]
    # larger caps never slow the burst down here
    assert rows[-1].e2e_latency <= rows[0].e2e_latency
    with pytest.raises(ValueError):
        sweep_max_batch(plan, trace, store, 0)
