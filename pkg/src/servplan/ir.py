"""Transformer IR: model configs parsed into a repeated block of typed cells."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional


class ConfigError(ValueError):
    """Raised for malformed or inconsistent model/cluster documents."""


class UnsupportedCellError(ConfigError):
    pass


@dataclass(frozen=True)
class DtypeFormat:
    name: str
    bytes_per_element: float

    def __str__(self) -> str:
        return self.name


DTYPES: dict[str, DtypeFormat] = {
    "fp16": DtypeFormat("FP16", 2.0),
    "fp8": DtypeFormat("FP8", 1.0),
    "int4": DtypeFormat("INT4", 0.5),
}

# Names used by open-weights configs for half precision.
_DTYPE_ALIASES = {"float16": "fp16", "bfloat16": "fp16", "bf16": "fp16", "half": "fp16",
                  "float8": "fp8", "e4m3": "fp8", "w8a8": "fp8", "int8": "fp8"}


def parse_dtype(value: str | DtypeFormat) -> DtypeFormat:
    if isinstance(value, DtypeFormat):
        return value
    key = str(value).strip().lower()
    key = _DTYPE_ALIASES.get(key, key)
    if key not in DTYPES:
        raise ConfigError(f"unknown dtype {value!r}; expected one of {sorted(DTYPES)}")
    return DTYPES[key]


def dtype_key(dtype: DtypeFormat) -> str:
    """Lower-case key used in profile tables ("fp16", "fp8", "int4")."""
    return dtype.name.lower()


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_size: int
    num_attention_heads: int
    num_kv_heads: int
    head_dim: int
    intermediate_size: int
    vocab_size: int
    num_experts: int = 0
    experts_per_token: int = 0
    weight_dtype: DtypeFormat = DTYPES["fp16"]
    activation_dtype: DtypeFormat = DTYPES["fp16"]
    kv_cache_dtype: DtypeFormat = DTYPES["fp16"]
    ffn_act: str = "silu"

    def __post_init__(self) -> None:
        for attr in ("hidden_size", "num_attention_heads", "num_kv_heads", "head_dim",
                     "intermediate_size", "vocab_size"):
            if getattr(self, attr) <= 0:
                raise ConfigError(f"{attr} must be positive, got {getattr(self, attr)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.hidden_size != self.num_attention_heads * self.head_dim:
            raise ConfigError(
                f"hidden_size {self.hidden_size} != heads {self.num_attention_heads} x head_dim {self.head_dim}")
        if self.num_attention_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_attention_heads {self.num_attention_heads} not divisible by num_kv_heads {self.num_kv_heads}")
        if (self.num_experts == 0) != (self.experts_per_token == 0):
            raise ConfigError("num_experts and experts_per_token must both be zero or both positive")
        if self.num_experts and not 1 <= self.experts_per_token <= self.num_experts:
            raise ConfigError("experts_per_token must lie in [1, num_experts]")

    @property
    def is_gqa(self) -> bool:
        return self.num_kv_heads < self.num_attention_heads

    @property
    def is_moe(self) -> bool:
        return self.num_experts > 0

    @property
    def kv_group_size(self) -> int:
        return self.num_attention_heads // self.num_kv_heads

    def with_layers(self, num_layers: int) -> "ModelSpec":
        return replace(self, num_layers=num_layers)


_REQUIRED = ("hidden_size", "num_attention_heads", "intermediate_size", "vocab_size")


def _first(doc: Mapping[str, Any], *keys: str, default: Any = None) -> Any:
    for k in keys:
        if k in doc and doc[k] is not None:
            return doc[k]
    return default


def parse_model_config(doc: Mapping[str, Any] | str | Path) -> ModelSpec:
    """Build a ModelSpec from an open-weights style config.

    ``doc`` may be a mapping, a JSON string, or a path to a JSON file.
    Unknown keys are ignored.
    """
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    if not isinstance(doc, Mapping):
        raise ConfigError("model config must be a JSON object")

    layers = _first(doc, "num_hidden_layers", "num_layers", "n_layer")
    if layers is None:
        raise ConfigError("missing required key 'num_hidden_layers'")
    for key in _REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    heads = int(doc["num_attention_heads"])
    hidden = int(doc["hidden_size"])
    kv_heads = int(_first(doc, "num_key_value_heads", "num_kv_heads", default=heads))
    if heads <= 0 or kv_heads <= 0:
        raise ConfigError("attention head counts must be positive")
    head_dim = int(_first(doc, "head_dim", default=hidden // heads))

    experts = int(_first(doc, "num_local_experts", "num_experts", "n_routed_experts", default=0))
    per_tok = int(_first(doc, "num_experts_per_tok", "experts_per_token", default=0))

    default_dtype = _first(doc, "torch_dtype", default="fp16")
    act = parse_dtype(_first(doc, "activation_dtype", default=default_dtype))
    weight = parse_dtype(_first(doc, "weight_dtype", default=default_dtype))
    kv = parse_dtype(_first(doc, "kv_cache_dtype", default=act))

    return ModelSpec(
        name=str(_first(doc, "name", "_name_or_path", "model_type", default="model")),
        num_layers=int(layers),
        hidden_size=hidden,
        num_attention_heads=heads,
        num_kv_heads=kv_heads,
        head_dim=head_dim,
        intermediate_size=int(doc["intermediate_size"]),
        vocab_size=int(doc["vocab_size"]),
        num_experts=experts,
        experts_per_token=per_tok,
        weight_dtype=weight,
        activation_dtype=act,
        kv_cache_dtype=kv,
        ffn_act=str(_first(doc, "ffn_type", "hidden_act", "activation_function", default="silu")).lower(),
    )


CELL_KINDS = ("MHA", "GQA", "MLP", "SwiGLU", "MoE")

_FFN_KINDS = {"silu": "SwiGLU", "swiglu": "SwiGLU", "swish": "SwiGLU",
              "gelu": "MLP", "gelu_new": "MLP", "gelu_pytorch_tanh": "MLP", "relu": "MLP", "mlp": "MLP"}


@dataclass(frozen=True)
class CellSpec:
    """One key operation of a layer and its parallelizable tasks.

    ``num_tasks`` is heads for attention, experts for MoE, and the column
    partition granularity (= attention heads) for dense feed-forward cells.
    """

    kind: str
    num_tasks: int
    hidden_size: int
    head_dim: int = 0
    num_kv_heads: int = 0
    intermediate_size: int = 0
    num_experts: int = 0
    experts_per_token: int = 0
    # TP granularity for MoE when every expert is sliced across devices.
    tp_granularity: int = 0

    @property
    def is_attention(self) -> bool:
        return self.kind in ("MHA", "GQA")

    @property
    def kv_group_size(self) -> int:
        return self.num_tasks // self.num_kv_heads if self.is_attention else 0

    def weight_params(self) -> int:
        """Parameters held by one instance of this cell (no biases or norms)."""
        h = self.hidden_size
        if self.is_attention:
            q = self.num_tasks * self.head_dim
            kv = self.num_kv_heads * self.head_dim
            return h * q + 2 * h * kv + q * h
        if self.kind == "SwiGLU":
            return 3 * h * self.intermediate_size
        if self.kind == "MLP":
            return 2 * h * self.intermediate_size
        if self.kind == "MoE":
            return self.num_experts * 3 * h * self.intermediate_size + h * self.num_experts
        raise UnsupportedCellError(self.kind)


@dataclass(frozen=True)
class BlockSpec:
    cells: tuple[CellSpec, ...]
    repeat_count: int
    model: Optional[ModelSpec] = field(default=None, compare=False)

    def flatten(self) -> list[CellSpec]:
        return [c for _ in range(self.repeat_count) for c in self.cells]


def to_transformer_ir(model: ModelSpec) -> BlockSpec:
    """Canonical block for a decoder layer: attention cell then feed-forward cell."""
    attn = CellSpec(
        kind="GQA" if model.is_gqa else "MHA",
        num_tasks=model.num_attention_heads,
        hidden_size=model.hidden_size,
        head_dim=model.head_dim,
        num_kv_heads=model.num_kv_heads,
    )
    if model.is_moe:
        ffn = CellSpec(
            kind="MoE",
            num_tasks=model.num_experts,
            hidden_size=model.hidden_size,
            intermediate_size=model.intermediate_size,
            num_experts=model.num_experts,
            experts_per_token=model.experts_per_token,
            tp_granularity=model.num_attention_heads,
        )
    else:
        kind = _FFN_KINDS.get(model.ffn_act)
        if kind is None:
            raise UnsupportedCellError(f"no registered feed-forward cell for activation {model.ffn_act!r}")
        ffn = CellSpec(
            kind=kind,
            num_tasks=model.num_attention_heads,
            hidden_size=model.hidden_size,
            intermediate_size=model.intermediate_size,
        )
    return BlockSpec(cells=(attn, ffn), repeat_count=model.num_layers, model=model)


def embedding_params(model: ModelSpec) -> int:
    # Tied input embedding / LM head.
    return model.vocab_size * model.hidden_size


def param_count(model: ModelSpec, include_embeddings: bool = True) -> int:
    block = to_transformer_ir(model)
    per_layer = sum(c.weight_params() for c in block.cells)
    total = per_layer * model.num_layers
    if include_embeddings:
        total += embedding_params(model)
    return total


def model_weight_bytes(model: ModelSpec, include_embeddings: bool = True) -> float:
    return param_count(model, include_embeddings) * model.weight_dtype.bytes_per_element
