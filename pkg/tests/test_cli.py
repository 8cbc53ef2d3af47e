import json
import subprocess
import sys

import pytest

from servplan.cli import EXIT_DATA, EXIT_INFEASIBLE, main

from conftest import LLAMA_405B, TINY, cluster_doc


@pytest.fixture
def inputs(tmp_path, write_json):
    model = write_json("model.json", TINY)
    cluster = write_json("cluster.json", cluster_doc((4,), memory_capacity=2e9))
    prof = tmp_path / "prof.jsonl"
    trace = tmp_path / "trace.jsonl"
    assert main(["synth-profile", "--cluster", str(cluster), "--model", str(model), "--out", str(prof)]) == 0
    assert main(["synth-trace", "--ctx-mean", "64", "--ctx-std", "16", "--gen-mean", "8", "--gen-std", "2",
                 "--rate", "50", "--n", "30", "--seed", "3", "--out", str(trace)]) == 0
    return {"model": model, "cluster": cluster, "profiles": prof, "trace": trace, "dir": tmp_path}


def _common(inp):
    return ["--model", str(inp["model"]), "--cluster", str(inp["cluster"]), "--profiles", str(inp["profiles"]),
            "--trace", str(inp["trace"])]


def test_search_writes_ranked_and_best(inputs, capsys):
    out = inputs["dir"] / "out"
    rc = main(["search", *_common(inputs), "--freq", "1.6", "2.0", "--workers", "1", "--out-dir", str(out)])
    assert rc == 0
    ranked = json.loads((out / "ranked.json").read_text())
    best = json.loads((out / "best_plan.json").read_text())
    assert ranked["entries"][0]["rank"] == 1
    lat = [e["summary"]["e2e_latency_s"] for e in ranked["entries"]]
    assert lat == sorted(lat)
    assert best["label"] == ranked["entries"][0]["summary"]["label"]
    assert "rank" in capsys.readouterr().out


def test_search_then_simulate_reproduces_best(inputs):
    out = inputs["dir"] / "out"
    main(["search", *_common(inputs), "--objective", "energy", "--freq", "1.2", "2.0", "--workers", "1",
          "--out-dir", str(out)])
    best = json.loads((out / "best_plan.json").read_text())
    rep_path = inputs["dir"] / "rep.json"
    iters = inputs["dir"] / "iters.jsonl"
    assert main(["simulate", *_common(inputs), "--plan", str(out / "best_plan.json"), "--out", str(rep_path),
                 "--emit-iterations", str(iters)]) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["total_energy_j"] == best["report"]["total_energy_j"]
    assert rep["frequency_ghz"] == best["frequency_ghz"]
    assert len(iters.read_text().splitlines()) == rep["num_iterations"]


def test_simulate_hand_written_plan(inputs, write_json):
    plan = write_json("hand.json", {"model_dp": 1, "num_stages": 2,
                                    "cells": [{"cell_dp": 1, "mode": "TP"}, {"cell_dp": 2}]})
    assert main(["simulate", *_common(inputs), "--plan", str(plan)]) == 0


def test_sweep(inputs, write_json):
    plan = write_json("hand.json", {"model_dp": 1, "num_stages": 1, "cells": [{"cell_dp": 1}, {"cell_dp": 1}]})
    out = inputs["dir"] / "sweep.json"
    assert main(["sweep", *_common(inputs), "--plan", str(plan), "--segments", "3", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 3
    caps = [r["max_batch_size"] for r in rows]
    assert caps == sorted(caps)


def test_config_file_supplies_defaults(inputs, write_json):
    cfg = write_json("run.json", {"model": "model.json", "cluster": "cluster.json", "profiles": "prof.jsonl",
                                  "trace": "trace.jsonl", "workers": 1, "freq": [2.0]})
    out = inputs["dir"] / "cfgout"
    assert main(["search", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "ranked.json").exists()


def test_missing_config_file_is_data_error(tmp_path):
    assert main(["search", "--config", str(tmp_path / "nope.json")]) == EXIT_DATA


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["search", "--model", "x.json"])
    assert exc.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_infeasible_model_exit_code(inputs, write_json, capsys):
    big = write_json("big.json", LLAMA_405B)
    args = _common(inputs)
    args[1] = str(big)
    out = inputs["dir"] / "never"
    assert main(["search", *args, "--workers", "1", "--out-dir", str(out)]) == EXIT_INFEASIBLE
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_malformed_trace_leaves_no_output(inputs):
    bad = inputs["dir"] / "bad.jsonl"
    bad.write_text('{"id": "a", "context_len": -3, "gen_len": 1, "arrival_s": 0}\n')
    args = _common(inputs)
    args[7] = str(bad)
    out = inputs["dir"] / "never"
    assert main(["search", *args, "--workers", "1", "--out-dir", str(out)]) == EXIT_DATA
    assert not out.exists()


def test_malformed_profile_is_data_error(inputs):
    inputs["profiles"].write_text("not json\n")
    assert main(["search", *_common(inputs), "--workers", "1",
                 "--out-dir", str(inputs["dir"] / "o")]) == EXIT_DATA


def test_synth_trace_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["synth-trace", "--workload", "chat", "--rate", "2", "--seed", "42", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1024


def test_synth_trace_needs_lengths(tmp_path):
    assert main(["synth-trace", "--out", str(tmp_path / "t.jsonl")]) == EXIT_DATA


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "servplan", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth-profile" in res.stdout
