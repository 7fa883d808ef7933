"""Factorized linear growth operators between transformer configurations.

An operator expands a source ParamSet to a wider and deeper target. Width
is handled by a shared residual-stream map applied on the fan-in and
fan-out sides of every projection, depth by a matrix of per-target-layer
combination coefficients over source layers. The feed-forward inner axis
either reuses the residual map tiled block-diagonally (shared mode) or
carries its own trainable map per source layer (per-family mode). The
classifier head gets its own fan-in map and keeps the class axis.

Application is linear in the source parameters and can be recorded on a
tape, so a task loss on the generated model differentiates back into the
operator matrices while the source stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ModelConfig, ParamSet, _truncated_normal, audit_shapes, expected_shapes
from .serialize import dumps_entries, loads_entries, read_entries, save_entries
from .tensor import (
    Tape,
    Tensor,
    backward,
    block_diag_tile,
    lincomb,
    matmul,
    matvec,
    row,
    transpose,
)

IDENTITY_NOISE_STD = 1e-3
RANDOM_INIT_STD = 0.02

SCHEMES = ("identity_preserving", "random")

# Per-layer entry suffixes grouped by how their extents expand.
_RESIDUAL_MATS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo")
_RESIDUAL_VECS = ("ln1.gamma", "ln1.beta", "attn.bq", "attn.bk", "attn.bv", "attn.bo",
                  "ln2.gamma", "ln2.beta", "ffn.b_out")


@dataclass(frozen=True)
class GrowthOperator:
    src: ModelConfig
    dst: ModelConfig
    residual: np.ndarray  # (dst.D, src.D) width map for the residual stream
    head: np.ndarray  # (dst.D, src.D) fan-in map for the classifier head
    depth: np.ndarray  # (dst.L, src.L) source-layer combination coefficients
    ffn_inner: tuple[np.ndarray, ...] = ()  # per source layer; empty => tiled residual

    @property
    def per_family(self) -> bool:
        return bool(self.ffn_inner)

    def matrices(self) -> dict[str, np.ndarray]:
        mats = {"residual": self.residual, "head": self.head, "depth": self.depth}
        for k, arr in enumerate(self.ffn_inner):
            mats[f"ffn_inner.{k}"] = arr
        return mats

    def with_matrices(self, arrays: dict[str, np.ndarray]) -> "GrowthOperator":
        inner = tuple(arrays[f"ffn_inner.{k}"] for k in range(len(self.ffn_inner)))
        return replace(
            self,
            residual=arrays["residual"],
            head=arrays["head"],
            depth=arrays["depth"],
            ffn_inner=inner,
        )


def _check_compatible(src: ModelConfig, dst: ModelConfig) -> None:
    if dst.hidden_dim < src.hidden_dim or dst.num_layers < src.num_layers:
        raise ValueError(
            f"target must dominate source: {src.hidden_dim}/{src.num_layers} -> "
            f"{dst.hidden_dim}/{dst.num_layers}"
        )
    for name in ("num_heads", "num_classes", "ffn_multiplier", "vocab_size", "max_seq_len"):
        a, b = getattr(src, name), getattr(dst, name)
        if a != b:
            raise ValueError(f"{name} must match across configs, got {a} vs {b}")


def _identity_block(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # Top cols x cols block is exact identity; extra rows carry small noise.
    out = np.zeros((rows, cols))
    out[:cols, :cols] = np.eye(cols)
    if rows > cols:
        out[cols:] = rng.standard_normal((rows - cols, cols)) * IDENTITY_NOISE_STD
    return out


def init_operator(
    src: ModelConfig,
    dst: ModelConfig,
    seed: int,
    scheme: str = "identity_preserving",
    per_family: bool = False,
) -> GrowthOperator:
    """Fresh operator; identity_preserving reproduces the source when configs match."""
    _check_compatible(src, dst)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    rng = np.random.default_rng(seed)
    sd, dd = src.hidden_dim, dst.hidden_dim
    sl, dl = src.num_layers, dst.num_layers
    m = src.ffn_multiplier
    if scheme == "identity_preserving":
        residual = _identity_block(rng, dd, sd)
        head = _identity_block(rng, dd, sd)
        inner = tuple(_identity_block(rng, m * dd, m * sd) for _ in range(sl)) if per_family else ()
        depth = np.zeros((dl, sl))
        for ell in range(dl):
            depth[ell, min(ell, sl - 1)] = 1.0
    else:
        residual = _truncated_normal(rng, (dd, sd), RANDOM_INIT_STD)
        head = _truncated_normal(rng, (dd, sd), RANDOM_INIT_STD)
        inner = (
            tuple(_truncated_normal(rng, (m * dd, m * sd), RANDOM_INIT_STD) for _ in range(sl))
            if per_family
            else ()
        )
        depth = _truncated_normal(rng, (dl, sl), RANDOM_INIT_STD)
    return GrowthOperator(src=src, dst=dst, residual=residual, head=head, depth=depth, ffn_inner=inner)


def apply(op: GrowthOperator, src_params: ParamSet, tape: Tape | None = None) -> ParamSet:
    """Generate the target ParamSet from the source through the operator.

    With a tape, the operator matrices are registered as tape parameters
    (named "ligo.<matrix>") and the source entries stay constant, so a loss
    downstream differentiates into the operator only.
    """
    audit_shapes(src_params, op.src)
    if tape is not None:
        mats = {name: tape.parameter(arr, name=f"ligo.{name}") for name, arr in op.matrices().items()}
    else:
        mats = {name: Tensor(arr) for name, arr in op.matrices().items()}

    B = mats["residual"]
    Bt = transpose(B)
    sl, dl = op.src.num_layers, op.dst.num_layers
    if op.per_family:
        inners = [mats[f"ffn_inner.{k}"] for k in range(sl)]
        inner_ts = [transpose(i) for i in inners]
    else:
        shared = block_diag_tile(B, op.src.ffn_multiplier)
        shared_t = transpose(shared)
        inners = [shared] * sl
        inner_ts = [shared_t] * sl

    # Width-expand every source layer once, then combine per target layer.
    expanded: dict[str, list[Tensor]] = {}
    for k in range(sl):
        p = f"layer{k}."
        for suffix in _RESIDUAL_MATS:
            expanded.setdefault(suffix, []).append(matmul(matmul(B, src_params[p + suffix]), Bt))
        expanded.setdefault("ffn.w_in", []).append(
            matmul(matmul(B, src_params[p + "ffn.w_in"]), inner_ts[k])
        )
        expanded.setdefault("ffn.w_out", []).append(
            matmul(matmul(inners[k], src_params[p + "ffn.w_out"]), Bt)
        )
        for suffix in _RESIDUAL_VECS:
            expanded.setdefault(suffix, []).append(matvec(B, src_params[p + suffix]))
        expanded.setdefault("ffn.b_in", []).append(matvec(inners[k], src_params[p + "ffn.b_in"]))

    gen: dict[str, Tensor] = {
        "embed.tok": matmul(src_params["embed.tok"], Bt),
        "embed.pos": matmul(src_params["embed.pos"], Bt),
    }
    for ell in range(dl):
        coeffs = row(mats["depth"], ell)
        for suffix, parts in expanded.items():
            gen[f"layer{ell}.{suffix}"] = lincomb(coeffs, parts)
    gen["head.w"] = matmul(mats["head"], src_params["head.w"])
    gen["head.b"] = Tensor(src_params["head.b"].data)  # class axis passes through unchanged

    out = ParamSet({name: gen[name] for name in expected_shapes(op.dst)})
    audit_shapes(out, op.dst)
    return out


@dataclass(frozen=True)
class OperatorCount:
    total: int
    parts: dict[str, int]


def count_operator_params(op: GrowthOperator) -> OperatorCount:
    """Trainable scalar count, itemized per matrix group."""
    parts = {
        "residual": op.residual.size,
        "head": op.head.size,
        "depth": op.depth.size,
    }
    if op.per_family:
        parts["ffn_inner"] = sum(a.size for a in op.ffn_inner)
    return OperatorCount(total=sum(parts.values()), parts=parts)


def operator_count(src: ModelConfig, dst: ModelConfig, per_family: bool) -> OperatorCount:
    """Closed-form count from the configs alone, without building matrices."""
    _check_compatible(src, dst)
    parts = {
        "residual": dst.hidden_dim * src.hidden_dim,
        "head": dst.hidden_dim * src.hidden_dim,
        "depth": dst.num_layers * src.num_layers,
    }
    if per_family:
        m = src.ffn_multiplier
        parts["ffn_inner"] = src.num_layers * (m * dst.hidden_dim) * (m * src.hidden_dim)
    return OperatorCount(total=sum(parts.values()), parts=parts)


def operator_gradients(tape: Tape, loss: Tensor, op: GrowthOperator) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every operator matrix recorded by apply()."""
    grads = backward(tape, loss)
    out = {}
    for name in op.matrices():
        leaf = tape.named.get(f"ligo.{name}")
        if leaf is None:
            raise ValueError(f"operator matrix {name!r} was not recorded on this tape")
        out[name] = grads[leaf]
    return out


# ---------------------------------------------------------------------------
# exchange payloads (shared binary format)


def _meta(op: GrowthOperator) -> dict:
    return {
        "kind": "growth_operator",
        "src": op.src.to_dict(),
        "dst": op.dst.to_dict(),
        "per_family": op.per_family,
    }


def _from_entries(entries: dict[str, np.ndarray], meta: dict) -> GrowthOperator:
    if meta.get("kind") != "growth_operator":
        raise ValueError("payload is not a growth operator")
    src = ModelConfig.from_dict(meta["src"])
    dst = ModelConfig.from_dict(meta["dst"])
    inner = ()
    if meta.get("per_family"):
        inner = tuple(entries[f"ffn_inner.{k}"] for k in range(src.num_layers))
    return GrowthOperator(
        src=src,
        dst=dst,
        residual=entries["residual"],
        head=entries["head"],
        depth=entries["depth"],
        ffn_inner=inner,
    )


def operator_to_bytes(op: GrowthOperator) -> bytes:
    return dumps_entries(op.matrices(), _meta(op))


def operator_from_bytes(data: bytes) -> GrowthOperator:
    return _from_entries(*loads_entries(data))


def save_operator(path, op: GrowthOperator) -> None:
    save_entries(path, op.matrices(), _meta(op))


def load_operator(path) -> GrowthOperator:
    return _from_entries(*read_entries(path))
