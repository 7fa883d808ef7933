"""Tiny transformer encoders with a canonical flat parameter layout.

Models are encoder-only with mean-pooled classification heads. Every
parameter lives in a ParamSet keyed by a canonical name whose shape is
fully determined by the ModelConfig, which keeps growth operators and
serialization honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    bmm,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean_pool,
    permute,
    reshape,
    scale,
    softmax,
)

LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02

_LAYER_FAMILIES = (
    ("ln1.gamma", "ln"),
    ("ln1.beta", "ln"),
    ("attn.wq", "attn_w"),
    ("attn.bq", "vec"),
    ("attn.wk", "attn_w"),
    ("attn.bk", "vec"),
    ("attn.wv", "attn_w"),
    ("attn.bv", "vec"),
    ("attn.wo", "attn_w"),
    ("attn.bo", "vec"),
    ("ln2.gamma", "ln"),
    ("ln2.beta", "ln"),
    ("ffn.w_in", "ffn_in"),
    ("ffn.b_in", "ffn_vec"),
    ("ffn.w_out", "ffn_out"),
    ("ffn.b_out", "vec"),
)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int
    num_layers: int
    num_heads: int
    num_classes: int
    ffn_multiplier: int = 4
    vocab_size: int = 128
    max_seq_len: int = 16

    def __post_init__(self):
        for name in (
            "hidden_dim",
            "num_layers",
            "num_heads",
            "num_classes",
            "ffn_multiplier",
            "vocab_size",
            "max_seq_len",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return self.hidden_dim * self.ffn_multiplier

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "num_classes": self.num_classes,
            "ffn_multiplier": self.ffn_multiplier,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def layer_entry_names(layer: int) -> list[str]:
    return [f"layer{layer}.{suffix}" for suffix, _ in _LAYER_FAMILIES]


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also defines the canonical entry order."""
    d, f = config.hidden_dim, config.ffn_dim
    per_layer = {
        "ln1.gamma": (d,),
        "ln1.beta": (d,),
        "attn.wq": (d, d),
        "attn.bq": (d,),
        "attn.wk": (d, d),
        "attn.bk": (d,),
        "attn.wv": (d, d),
        "attn.bv": (d,),
        "attn.wo": (d, d),
        "attn.bo": (d,),
        "ln2.gamma": (d,),
        "ln2.beta": (d,),
        "ffn.w_in": (d, f),
        "ffn.b_in": (f,),
        "ffn.w_out": (f, d),
        "ffn.b_out": (d,),
    }
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        for suffix, shape in per_layer.items():
            shapes[f"layer{i}.{suffix}"] = shape
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


class ParamSet:
    """Ordered mapping from canonical parameter names to tensors."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        self._entries: dict[str, Tensor] = {
            name: (t if isinstance(t, Tensor) else Tensor(t)) for name, t in dict(entries).items()
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        return cls(arrays)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._entries.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def clone(self) -> "ParamSet":
        return ParamSet({name: Tensor(t.data.copy()) for name, t in self._entries.items()})

    def to_vector(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def total_size(self) -> int:
        return sum(t.data.size for t in self._entries.values())


def audit_shapes(params: ParamSet, config: ModelConfig) -> None:
    """Check names, order and shapes against the config; raise on any mismatch."""
    want = expected_shapes(config)
    have = params.names()
    if have != list(want):
        missing = [n for n in want if n not in params]
        extra = [n for n in have if n not in want]
        if missing or extra:
            raise ShapeError(f"param set mismatch: missing {missing}, unexpected {extra}")
        raise ShapeError("param set not in canonical order")
    for name, shape in want.items():
        got = params[name].data.shape
        if got != shape:
            raise ShapeError(f"entry {name!r} has shape {got}, expected {shape}")


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    # Resample anything beyond two sigma; keeps the draw deterministic in seed.
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        x[bad] = rng.standard_normal(n_bad)
    return x * std


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Truncated-normal weights (std 0.02), zero biases, unit layer-norm gammas."""
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in expected_shapes(config).items():
        if len(shape) == 1:
            value = np.ones(shape) if name.endswith("gamma") else np.zeros(shape)
        else:
            value = _truncated_normal(rng, shape, INIT_STD)
        entries[name] = value
    return ParamSet.from_arrays(entries)


def forward(params: ParamSet, config: ModelConfig, batch) -> Tensor:
    """Logits (batch, num_classes) for a (batch, seq) matrix of token ids.

    Runs entirely through kernel ops, so when the param tensors live on a
    tape the gradients reach every entry.
    """
    ids = np.asarray(batch)
    if ids.ndim != 2:
        raise ShapeError(f"batch must be (batch, seq), got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("token ids must be integers")
    b, s = ids.shape
    if s > config.max_seq_len:
        raise ValueError(f"sequence length {s} exceeds max_seq_len {config.max_seq_len}")
    d, h = config.hidden_dim, config.num_heads
    hd = config.head_dim

    tok = embedding_lookup(params["embed.tok"], ids)
    pos = embedding_lookup(params["embed.pos"], np.tile(np.arange(s), (b, 1)))
    x = reshape(add(tok, pos), (b * s, d))

    for i in range(config.num_layers):
        p = f"layer{i}."
        a = layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], LAYER_NORM_EPS)
        q = add(matmul(a, params[p + "attn.wq"]), params[p + "attn.bq"])
        k = add(matmul(a, params[p + "attn.wk"]), params[p + "attn.bk"])
        v = add(matmul(a, params[p + "attn.wv"]), params[p + "attn.bv"])
        q = reshape(permute(reshape(q, (b, s, h, hd)), (0, 2, 1, 3)), (b * h, s, hd))
        k = reshape(permute(reshape(k, (b, s, h, hd)), (0, 2, 1, 3)), (b * h, s, hd))
        v = reshape(permute(reshape(v, (b, s, h, hd)), (0, 2, 1, 3)), (b * h, s, hd))
        scores = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
        ctx = bmm(softmax(scores), v)
        ctx = reshape(permute(reshape(ctx, (b, h, s, hd)), (0, 2, 1, 3)), (b * s, d))
        x = add(x, add(matmul(ctx, params[p + "attn.wo"]), params[p + "attn.bo"]))
        f = layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], LAYER_NORM_EPS)
        f = gelu(add(matmul(f, params[p + "ffn.w_in"]), params[p + "ffn.b_in"]))
        f = add(matmul(f, params[p + "ffn.w_out"]), params[p + "ffn.b_out"])
        x = add(x, f)

    pooled = mean_pool(reshape(x, (b, s, d)))
    return add(matmul(pooled, params["head.w"]), params["head.b"])


@dataclass(frozen=True)
class ParamCount:
    total: int
    families: dict[str, int] = field(default_factory=dict)


def _family_of(name: str) -> str:
    if name == "embed.tok":
        return "embedding"
    if name == "embed.pos":
        return "positional"
    if name.startswith("head."):
        return "head"
    suffix = name.split(".", 1)[1]
    if suffix.startswith("ln"):
        return "layer_norm"
    if suffix.startswith("attn.w"):
        return "attention_weights"
    if suffix.startswith("attn.b"):
        return "attention_biases"
    if suffix.startswith("ffn.w"):
        return "ffn_weights"
    return "ffn_biases"


def count_params(config: ModelConfig) -> ParamCount:
    """Exact scalar-parameter count, itemized by weight family."""
    families: dict[str, int] = {}
    for name, shape in expected_shapes(config).items():
        fam = _family_of(name)
        families[fam] = families.get(fam, 0) + math.prod(shape)
    return ParamCount(total=sum(families.values()), families=families)


def save_params(path, params: ParamSet, config: ModelConfig | None = None) -> None:
    from .serialize import save_entries

    meta = {"kind": "param_set"}
    if config is not None:
        meta["config"] = config.to_dict()
    save_entries(path, params.arrays(), meta)


def load_params(path) -> tuple[ParamSet, ModelConfig | None]:
    from .serialize import read_entries

    entries, meta = read_entries(path)
    if meta.get("kind") != "param_set":
        raise ValueError("payload is not a param set")
    config = ModelConfig.from_dict(meta["config"]) if "config" in meta else None
    params = ParamSet.from_arrays(entries)
    if config is not None:
        audit_shapes(params, config)
    return params, config
