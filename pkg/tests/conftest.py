import json

import pytest

from servplan.cluster import parse_cluster_spec
from servplan.cost import GridSpec, synth_profiles
from servplan.ir import parse_model_config, to_transformer_ir

LLAMA_70B = {
    "name": "llama-3.1-70b", "num_hidden_layers": 80, "hidden_size": 8192, "num_attention_heads": 64,
    "num_key_value_heads": 8, "intermediate_size": 28672, "vocab_size": 128256, "hidden_act": "silu",
    "torch_dtype": "bfloat16",
}
LLAMA_405B = dict(LLAMA_70B, name="llama-3.1-405b", num_hidden_layers=126, hidden_size=16384,
                  num_attention_heads=128, intermediate_size=53248)
MIXTRAL_8X22B = {
    "name": "mixtral-8x22b", "num_hidden_layers": 56, "hidden_size": 6144, "num_attention_heads": 48,
    "num_key_value_heads": 8, "intermediate_size": 16384, "vocab_size": 32768, "num_local_experts": 8,
    "num_experts_per_tok": 2, "hidden_act": "silu",
}
TINY = {
    "name": "tiny", "num_hidden_layers": 4, "hidden_size": 256, "num_attention_heads": 8,
    "num_key_value_heads": 2, "intermediate_size": 512, "vocab_size": 1000,
}


def h100_device(**over):
    dev = {"name": "H100", "memory_capacity": 80e9, "peak_flops": {"fp16": 989e12, "fp8": 1979e12},
           "peak_mem_bandwidth": 3.35e12, "frequency_options": [0.8, 1.2, 1.6, 2.0], "power_watts": 700.0}
    dev.update(over)
    return dev


def cluster_doc(fan_outs=(8,), bandwidths=None, latencies=None, **device):
    bandwidths = bandwidths or [450e9, 50e9, 25e9][: len(fan_outs)]
    latencies = latencies or [2e-6, 10e-6, 20e-6][: len(fan_outs)]
    return {"levels": [{"fan_out": f, "link_bandwidth": b, "link_latency": l}
                       for f, b, l in zip(fan_outs, bandwidths, latencies)],
            "device": h100_device(**device)}


@pytest.fixture
def llama70b():
    return parse_model_config(LLAMA_70B)


@pytest.fixture
def tiny_model():
    return parse_model_config(TINY)


@pytest.fixture
def node8():
    return parse_cluster_spec(cluster_doc((8,)))


@pytest.fixture
def two_nodes():
    return parse_cluster_spec(cluster_doc((8, 2)))


@pytest.fixture
def tiny_setup():
    model = parse_model_config(TINY)
    cluster = parse_cluster_spec(cluster_doc((4,), memory_capacity=2e9))
    store = synth_profiles(cluster.device, cluster, GridSpec.for_model(model, cluster.num_devices))
    return model, to_transformer_ir(model), cluster, store


@pytest.fixture
def write_json(tmp_path):
    def _write(name, doc):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p
    return _write
