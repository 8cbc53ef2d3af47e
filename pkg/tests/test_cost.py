import io
import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from servplan.cluster import parse_cluster_spec
from servplan.cost import (CollectiveQuery, GridSpec, MissingTableError, OpQuery, ProfileError,
                           ProfileRangeWarning, collective_seconds, dump_profiles, from_records, kv_bytes_per_token,
                           load_profiles, power_at, query_energy, query_time, roofline_seconds, synth_profiles)
from servplan.ir import parse_model_config

from conftest import LLAMA_70B, TINY, cluster_doc


def gemm_rec(tokens, seconds, joules=None, n=8, k=8, freq=1.0, dtype="fp16"):
    return {"table": "compute", "op": "gemm", "dtype": dtype, "freq_ghz": freq,
            "axes": {"tokens": tokens, "n": n, "k": k}, "seconds": seconds,
            "joules": seconds * 100 if joules is None else joules}


def coll_rec(payload, seconds, kind="AllReduce", devices=8, nodes=1):
    return {"table": "collective", "op": kind, "dtype": None, "freq_ghz": None,
            "axes": {"payload_bytes": payload, "num_devices": devices, "num_nodes": nodes},
            "seconds": seconds, "joules": seconds * 10}


def q(tokens, n=8, k=8, freq=1.0):
    return OpQuery("gemm", "fp16", freq, (tokens, n, k))


def test_midpoint_of_two_knots():
    store = from_records([gemm_rec(1, 0.010), gemm_rec(3, 0.018)])
    assert query_time(store, q(2)) == pytest.approx(0.014, rel=1e-12)


def test_knot_queries_are_exact():
    store = from_records([gemm_rec(1, 0.010, 1.5), gemm_rec(3, 0.018, 2.5)])
    assert store.lookup(q(1)) == (0.010, 1.5)
    assert store.lookup(q(3)) == (0.018, 2.5)


def test_bilinear_hand_computed():
    recs = [gemm_rec(t, s, n=n) for (t, n), s in {(0, 8): 1.0, (10, 8): 2.0, (0, 16): 3.0, (10, 16): 6.0}.items()]
    store = from_records(recs)
    # t at 0.3, n at 0.5: (1*0.7 + 2*0.3)*0.5 + (3*0.7 + 6*0.3)*0.5
    assert query_time(store, q(3, n=12)) == pytest.approx(0.5 * 1.3 + 0.5 * 3.9)


def test_unsorted_records_are_accepted():
    store = from_records([gemm_rec(3, 0.018), gemm_rec(1, 0.010)])
    assert query_time(store, q(2)) == pytest.approx(0.014)


def test_duplicate_knot_rejected():
    with pytest.raises(ProfileError):
        from_records([gemm_rec(1, 0.01), gemm_rec(1, 0.02), gemm_rec(3, 0.03)])


def test_incomplete_grid_rejected():
    with pytest.raises(ProfileError):
        from_records([gemm_rec(1, 1.0, n=8), gemm_rec(2, 1.0, n=8), gemm_rec(1, 1.0, n=16)])


@pytest.mark.parametrize("bad", [-1.0, math.nan, math.inf])
def test_negative_or_non_finite_rejected(bad):
    with pytest.raises(ProfileError):
        from_records([gemm_rec(1, bad, joules=1.0)])


def test_missing_field_and_unknown_op():
    with pytest.raises(ProfileError):
        from_records([{"table": "compute", "op": "gemm"}])
    with pytest.raises(ProfileError):
        from_records([dict(gemm_rec(1, 1.0), op="conv")])
    with pytest.raises(ProfileError):
        from_records([])


def test_missing_table_is_key_error():
    store = from_records([gemm_rec(1, 0.01)])
    with pytest.raises(MissingTableError):
        store.lookup(q(1, freq=2.0))
    with pytest.raises(KeyError):
        store.lookup(CollectiveQuery("AllReduce", 10, 8, 1))


def test_clamp_warns_once_per_boundary():
    store = from_records([gemm_rec(1, 0.010), gemm_rec(3, 0.018)])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert query_time(store, q(5)) == 0.018
        assert query_time(store, q(9)) == 0.018
        assert query_time(store, q(0.5)) == 0.010
        assert query_time(store, q(0.25)) == 0.010
    hits = [x for x in w if issubclass(x.category, ProfileRangeWarning)]
    assert len(hits) == 2
    assert len(store.clamp_warnings) == 2


def test_collective_one_dimensional_lookup():
    store = from_records([coll_rec(0, 1e-5), coll_rec(1e6, 1e-3)])
    assert query_time(store, CollectiveQuery("AllReduce", 5e5, 8, 1)) == pytest.approx((1e-5 + 1e-3) / 2)
    assert query_energy(store, CollectiveQuery("AllReduce", 0, 8, 1)) == pytest.approx(1e-4)


def test_jsonl_round_trip_and_blank_lines(node8, tmp_path):
    store = synth_profiles(node8.device, node8, GridSpec(tokens=(1, 64), gemm_n=(1024,), gemm_k=(1024,),
                                                          attention_heads=(8,), head_dims=(128,),
                                                          payload_bytes=(0, 1024)))
    buf = io.StringIO()
    dump_profiles(store, buf)
    text = buf.getvalue().replace("\n", "\n\n", 1)
    again = load_profiles(io.StringIO(text))
    for rec in store.records()[:50]:
        if rec["table"] == "compute":
            qq = OpQuery(rec["op"], rec["dtype"], rec["freq_ghz"], tuple(rec["axes"].values()))
        else:
            a = rec["axes"]
            qq = CollectiveQuery(rec["op"], a["payload_bytes"], a["num_devices"], a["num_nodes"])
        assert again.lookup(qq) == store.lookup(qq)
    p = tmp_path / "p.jsonl"
    p.write_text(buf.getvalue())
    assert len(load_profiles(p).records()) == len(store.records())


def test_malformed_json_line():
    with pytest.raises(ProfileError):
        load_profiles(io.StringIO("{not json}\n"))


def test_roofline_memory_and_compute_bound(node8):
    dev = node8.device
    # decode gemm: one token, weight-read bound
    t = roofline_seconds(dev, "gemm", (1, 8192, 8192), "fp16", 2.0)
    assert t == pytest.approx((8192 * 8192 + 8192 + 8192) * 2 / 3.35e12)
    # large prefill: compute bound
    t = roofline_seconds(dev, "gemm", (8192, 8192, 8192), "fp16", 2.0)
    assert t == pytest.approx(2 * 8192 ** 3 / 989e12)
    # half frequency doubles compute-bound time
    assert roofline_seconds(dev, "gemm", (8192, 8192, 8192), "fp16", 1.0) == pytest.approx(2 * t)


def test_allreduce_ring_time(node8):
    t = collective_seconds(node8, "AllReduce", 1e9, 8, 1)
    assert t == pytest.approx(2 * 7 / 8 * 1e9 / 450e9 + 14 * 2e-6)
    assert 2 * 7 / 8 * 1e9 / 450e9 == pytest.approx(3.889e-3, rel=1e-3)


def test_inter_node_uses_slow_link(two_nodes):
    assert collective_seconds(two_nodes, "AllReduce", 1e8, 16, 2) > 5 * collective_seconds(two_nodes, "AllReduce",
                                                                                           1e8, 8, 1)


def test_cube_law_power(node8):
    assert power_at(node8.device, 2.0) == 700.0
    assert power_at(node8.device, 1.0) == pytest.approx(87.5)


def test_kv_bytes_per_token_llama70b():
    assert kv_bytes_per_token(parse_model_config(LLAMA_70B)) == 327_680


def test_synth_grid_covers_planner_shapes(tiny_setup):
    model, block, cluster, store = tiny_setup
    from servplan.planner import enumerate_schemes

    with warnings.catch_warnings():
        warnings.simplefilter("error", ProfileRangeWarning)
        for sc in enumerate_schemes(block, cluster.num_devices):
            for cs in sc.per_cell:
                for dev_ops in cs.task_mapping.ops:
                    for op in dev_ops:
                        for f in cluster.device.frequency_options:
                            store.lookup(OpQuery(op.op, "fp16", f, (64 * op.token_scale,) + op.dims))


def test_synth_lower_frequency_saves_energy_costs_time(node8):
    model = parse_model_config(TINY)
    store = synth_profiles(node8.device, node8, GridSpec.for_model(model, 8))
    hi = store.lookup(OpQuery("gemm", "fp16", 2.0, (4096, 512, 256)))
    lo = store.lookup(OpQuery("gemm", "fp16", 0.8, (4096, 512, 256)))
    assert lo[0] >= hi[0] and lo[1] < hi[1]


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-6, 1.0), b=st.floats(1e-6, 1.0), x=st.floats(1, 3), scale=st.floats(0.1, 10))
def test_scaling_all_values_scales_lookups(a, b, x, scale):
    base = from_records([gemm_rec(1, a), gemm_rec(3, b)])
    scaled = base.map_records(lambda r: dict(r, seconds=r["seconds"] * scale, joules=r["joules"] * scale))
    s0, j0 = base.lookup(q(x))
    s1, j1 = scaled.lookup(q(x))
    assert s1 == pytest.approx(s0 * scale, rel=1e-9)
    assert j1 == pytest.approx(j0 * scale, rel=1e-9)
    assert min(a, b) - 1e-15 <= s0 <= max(a, b) + 1e-15


@settings(max_examples=50, deadline=None)
@given(x=st.floats(1, 3), y=st.floats(1, 3))
def test_interpolation_monotone_for_monotone_table(x, y):
    store = from_records([gemm_rec(1, 0.01), gemm_rec(2, 0.02), gemm_rec(3, 0.05)])
    if x <= y:
        assert query_time(store, q(x)) <= query_time(store, q(y)) + 1e-15


def test_store_pickles(node8):
    import pickle

    store = from_records([gemm_rec(1, 0.010), gemm_rec(3, 0.018)])
    clone = pickle.loads(pickle.dumps(store))
    assert clone.lookup(q(2)) == store.lookup(q(2))


def test_fp8_compute_faster_than_fp16():
    c = parse_cluster_spec(cluster_doc((8,)))
    assert roofline_seconds(c.device, "gemm", (8192,) * 3, "fp8", 2.0) < roofline_seconds(c.device, "gemm",
                                                                                         (8192,) * 3, "fp16", 2.0)
