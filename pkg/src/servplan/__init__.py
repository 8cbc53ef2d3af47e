"""Search and simulation of hybrid-parallel LLM serving plans."""

from .batching import BatchPolicy
from .cluster import ClusterSpec, DeviceSpec, LevelSpec, collective_span, map_devices, parse_cluster_spec
from .cost import GridSpec, ProfileStore, load_profiles, query_energy, query_time, synth_profiles
from .ir import BlockSpec, CellSpec, ModelSpec, model_weight_bytes, parse_model_config, to_transformer_ir
from .planner import ExecutionPlan, enumerate_schemes, generate_plans
from .simulator import SimConfig, search, simulate_plan, sweep_max_batch
from .traces import Trace, load_trace, synth_trace

__version__ = "0.1.0"
