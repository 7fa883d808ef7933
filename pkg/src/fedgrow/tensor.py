"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable values. Operations record pull-back closures on a
Tape whenever an input lives on one; pure-constant inputs skip recording,
so the same code serves training and plain evaluation. Tapes are Wengert
lists: append order is execution order, which is already topological, and
the backward sweep visits each node at most once in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GELU_TANH_COEFF",
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "bmm",
    "matvec",
    "add",
    "mul",
    "scale",
    "transpose",
    "permute",
    "reshape",
    "row",
    "lincomb",
    "block_diag_tile",
    "sum_all",
    "gelu",
    "softmax",
    "layer_norm",
    "softmax_cross_entropy",
    "embedding_lookup",
    "mean_pool",
]

# Constants of the tanh GELU approximation used throughout.
GELU_TANH_COEFF = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class Tensor:
    """Immutable dense float64 value, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr)
        arr.flags.writeable = False
        self.data = arr
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, data: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        t = object.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        kind = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.data.shape}, {kind})"


class Tape:
    """Execution-ordered record of differentiable operations."""

    __slots__ = ("_inputs", "_pulls", "_params", "named")

    def __init__(self):
        self._inputs: list[tuple[int | None, ...]] = []
        self._pulls: list[Callable | None] = []
        self._params: list[Tensor] = []
        self.named: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._inputs)

    def parameter(self, value, name: str | None = None) -> Tensor:
        """Register a leaf that will receive a gradient from backward()."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor._wrap(np.array(data, dtype=np.float64), self, self._append((), None))
        self._params.append(t)
        if name is not None:
            if name in self.named:
                raise ValueError(f"duplicate parameter name {name!r} on tape")
            self.named[name] = t
        return t

    def _append(self, input_ids: tuple[int | None, ...], pull) -> int:
        self._inputs.append(input_ids)
        self._pulls.append(pull)
        return len(self._inputs) - 1


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; returns grads keyed by parameter tensor.

    Every tensor registered through Tape.parameter gets an entry (zeros if the
    loss does not depend on it); tensors not registered get none.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ValueError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for nid in range(loss.node, -1, -1):
        if nid not in grads:
            continue
        pull = tape._pulls[nid]
        if pull is None:
            continue  # leaf: gradient stays for collection below
        g = grads.pop(nid)
        for input_id, gi in zip(tape._inputs[nid], pull(g)):
            if input_id is None or gi is None:
                continue
            acc = grads.get(input_id)
            grads[input_id] = gi if acc is None else acc + gi
    return {t: grads.get(t.node, np.zeros_like(t.data)) for t in tape._params}


# ---------------------------------------------------------------------------
# recording plumbing


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite values")


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def _emit(tape: Tape | None, out: np.ndarray, inputs: Sequence[Tensor], pull) -> Tensor:
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    return Tensor._wrap(out, tape, tape._append(ids, pull))


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def pull(g):
        return g @ bd.T, ad.T @ g

    return _emit(_tape_of(a, b), ad @ bd, (a, b), pull)


def bmm(a, b) -> Tensor:
    """Stacked matrix product: (n,i,j) @ (n,j,k) -> (n,i,k)."""
    a, b = _coerce(a), _coerce(b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ShapeError(f"bmm needs (n,i,j)@(n,j,k), got {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def pull(g):
        return g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g

    return _emit(_tape_of(a, b), ad @ bd, (a, b), pull)


def matvec(m, v) -> Tensor:
    m, v = _coerce(m), _coerce(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"matvec needs (r,c)@(c,), got {m.data.shape} @ {v.data.shape}")
    md, vd = m.data, v.data

    def pull(g):
        return np.outer(g, vd), md.T @ g

    return _emit(_tape_of(m, v), md @ vd, (m, v), pull)


def add(a, b) -> Tensor:
    """Elementwise sum; the only broadcast allowed is bias-add (..., d) + (d,)."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:

        def pull(g):
            return g, g

        return _emit(_tape_of(a, b), ad + bd, (a, b), pull)
    if bd.ndim == 1 and ad.ndim >= 2 and ad.shape[-1] == bd.shape[0]:
        d = bd.shape[0]

        def pull(g):
            return g, g.reshape(-1, d).sum(axis=0)

        return _emit(_tape_of(a, b), ad + bd, (a, b), pull)
    raise ShapeError(f"add needs equal shapes or (...,d)+(d,), got {ad.shape} + {bd.shape}")


def mul(a, b) -> Tensor:
    """Elementwise product; the only broadcast allowed is row-wise (..., d) * (d,)."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:

        def pull(g):
            return g * bd, g * ad

        return _emit(_tape_of(a, b), ad * bd, (a, b), pull)
    if bd.ndim == 1 and ad.ndim >= 2 and ad.shape[-1] == bd.shape[0]:
        d = bd.shape[0]

        def pull(g):
            return g * bd, (g * ad).reshape(-1, d).sum(axis=0)

        return _emit(_tape_of(a, b), ad * bd, (a, b), pull)
    raise ShapeError(f"mul needs equal shapes or (...,d)*(d,), got {ad.shape} * {bd.shape}")


def scale(x, c: float) -> Tensor:
    x = _coerce(x)
    c = float(c)

    def pull(g):
        return (c * g,)

    return _emit(_tape_of(x), c * x.data, (x,), pull)


def transpose(x) -> Tensor:
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.data.shape}")

    def pull(g):
        return (g.T,)

    return _emit(_tape_of(x), x.data.T, (x,), pull)


def permute(x, axes: Sequence[int]) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {x.data.shape}")
    inverse = tuple(np.argsort(axes))

    def pull(g):
        return (g.transpose(inverse),)

    return _emit(_tape_of(x), x.data.transpose(axes), (x,), pull)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}")
    old = x.data.shape

    def pull(g):
        return (g.reshape(old),)

    return _emit(_tape_of(x), x.data.reshape(shape), (x,), pull)


def row(m, i: int) -> Tensor:
    m = _coerce(m)
    if m.data.ndim != 2:
        raise ShapeError(f"row needs a matrix, got shape {m.data.shape}")
    r, c = m.data.shape
    i = int(i)
    if not 0 <= i < r:
        raise ShapeError(f"row index {i} out of range for {r} rows")

    def pull(g):
        gm = np.zeros((r, c))
        gm[i] = g
        return (gm,)

    return _emit(_tape_of(m), m.data[i].copy(), (m,), pull)


def lincomb(coeffs, parts: Sequence) -> Tensor:
    """Linear combination sum_k coeffs[k] * parts[k] of same-shaped tensors."""
    coeffs = _coerce(coeffs)
    parts = [_coerce(p) for p in parts]
    if coeffs.data.ndim != 1 or len(parts) != coeffs.data.shape[0]:
        raise ShapeError(f"lincomb needs ({len(parts)},) coefficients, got {coeffs.data.shape}")
    if not parts:
        raise ShapeError("lincomb needs at least one part")
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != base:
            raise ShapeError(f"lincomb parts disagree: {base} vs {p.data.shape}")
    cd = coeffs.data
    pdata = [p.data for p in parts]
    out = cd[0] * pdata[0]
    for k in range(1, len(pdata)):
        out = out + cd[k] * pdata[k]

    def pull(g):
        dc = np.array([np.sum(g * pk) for pk in pdata])
        return (dc, *[ck * g for ck in cd])

    return _emit(_tape_of(coeffs, *parts), out, (coeffs, *parts), pull)


def block_diag_tile(block, copies: int) -> Tensor:
    """Block-diagonal matrix with `copies` repeats of `block` on the diagonal."""
    block = _coerce(block)
    if block.data.ndim != 2:
        raise ShapeError(f"block_diag_tile needs a matrix, got shape {block.data.shape}")
    copies = int(copies)
    if copies < 1:
        raise ShapeError(f"copies must be positive, got {copies}")
    r, c = block.data.shape
    out = np.zeros((copies * r, copies * c))
    for j in range(copies):
        out[j * r : (j + 1) * r, j * c : (j + 1) * c] = block.data

    def pull(g):
        gb = np.zeros((r, c))
        for j in range(copies):
            gb += g[j * r : (j + 1) * r, j * c : (j + 1) * c]
        return (gb,)

    return _emit(_tape_of(block), out, (block,), pull)


def sum_all(x) -> Tensor:
    x = _coerce(x)
    shape = x.data.shape

    def pull(g):
        return (np.full(shape, float(g)),)

    return _emit(_tape_of(x), np.asarray(x.data.sum()), (x,), pull)


def gelu(x) -> Tensor:
    x = _coerce(x)
    xd = x.data
    inner = _GELU_SCALE * (xd + GELU_TANH_COEFF * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def pull(g):
        dinner = _GELU_SCALE * (1.0 + 3.0 * GELU_TANH_COEFF * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner),)

    return _emit(_tape_of(x), out, (x,), pull)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _coerce(x)
    if x.data.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=-1, keepdims=True)

    def pull(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _emit(_tape_of(x), s, (x,), pull)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale/shift."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if x.data.ndim < 1:
        raise ShapeError("layer_norm needs at least one axis")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.data.shape} / {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def pull(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2), dgamma, dbeta

    return _emit(_tape_of(x, gamma, beta), out, (x, gamma, beta), pull)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under row softmax."""
    logits = _coerce(logits)
    lab = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got shape {logits.data.shape}")
    n, c = logits.data.shape
    if n == 0:
        raise ValueError("empty batch")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("labels must be integers")
    if lab.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {lab.shape}")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=1)
    p = ez / total[:, None]
    nll = np.log(total) - z[np.arange(n), lab]
    out = np.asarray(nll.mean())

    def pull(g):
        grad = p.copy()
        grad[np.arange(n), lab] -= 1.0
        return (grad * (float(g) / n),)

    return _emit(_tape_of(logits), out, (logits,), pull)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (vocab, dim) table by integer id; grads scatter-add back."""
    table = _coerce(table)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got shape {table.data.shape}")
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("ids must be integers")
    v, d = table.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ValueError(f"id out of range [0, {v}): min {idx.min()}, max {idx.max()}")

    def pull(g):
        gt = np.zeros((v, d))
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit(_tape_of(table), table.data[idx], (table,), pull)


def mean_pool(x) -> Tensor:
    """Mean over the middle axis of (batch, seq, dim)."""
    x = _coerce(x)
    if x.data.ndim != 3:
        raise ShapeError(f"mean_pool needs (batch, seq, dim), got shape {x.data.shape}")
    s = x.data.shape[1]

    def pull(g):
        return (np.repeat(g[:, None, :] / s, s, axis=1),)

    return _emit(_tape_of(x), x.data.mean(axis=1), (x,), pull)
