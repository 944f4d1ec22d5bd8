"""Differentiable operations used by the detector head and its losses.

Only the op set this package needs is provided. Elementwise ops accept
either identical shapes or a per-channel vector ``b`` broadcast against the
last dimension of ``a``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, backward_rule

COSINE_EPS = 1e-8


def _check_binary(a: Tensor, b: Tensor, what: str) -> bool:
    """Return True when ``b`` broadcasts as a per-channel vector."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_channel(g: np.ndarray, broadcast: bool) -> np.ndarray:
    if not broadcast:
        return g
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# --- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``[m, k]`` (or ``[k]``) tensor with a ``[k, n]`` one."""
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._wrap(a.data @ b.data, "matmul", (a, b))


@backward_rule("matmul")
def _matmul_backward(node, g):
    a, b = node.inputs
    if a.ndim == 1:
        return g @ b.data.T, np.outer(a.data, g)
    return g @ b.data.T, a.data.T @ g


# --- elementwise ---------------------------------------------------------


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_binary(a, b, "add")
    return Tensor._wrap(a.data + b.data, "add", (a, b), broadcast=bc)


@backward_rule("add")
def _add_backward(node, g):
    return g, _reduce_channel(g, node.saved["broadcast"])


def sub(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_binary(a, b, "sub")
    return Tensor._wrap(a.data - b.data, "sub", (a, b), broadcast=bc)


@backward_rule("sub")
def _sub_backward(node, g):
    return g, -_reduce_channel(g, node.saved["broadcast"])


def mul(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_binary(a, b, "mul")
    return Tensor._wrap(a.data * b.data, "mul", (a, b), broadcast=bc)


@backward_rule("mul")
def _mul_backward(node, g):
    a, b = node.inputs
    return g * b.data, _reduce_channel(g * a.data, node.saved["broadcast"])


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    return Tensor._wrap(a.data * c, "scale", (a,), c=float(c))


@backward_rule("scale")
def _scale_backward(node, g):
    return (g * node.saved["c"],)


def relu(a: Tensor) -> Tensor:
    return Tensor._wrap(np.maximum(a.data, 0.0), "relu", (a,))


@backward_rule("relu")
def _relu_backward(node, g):
    return (g * (node.inputs[0].data > 0.0),)


# --- structural ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    return Tensor._wrap(out, "concat", tensors, axis=axis, sizes=sizes)


@backward_rule("concat")
def _concat_backward(node, g):
    cuts = np.cumsum(node.saved["sizes"])[:-1]
    return np.split(g, cuts, axis=node.saved["axis"])


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]`` along axis 0; repeated indices are allowed."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or len(index) == 0:
        raise DimensionError("gather_rows needs a non-empty 1-d index")
    if index.min() < 0 or index.max() >= a.shape[0]:
        raise IndexError(f"gather_rows index out of range for {a.shape[0]} rows")
    return Tensor._wrap(a.data[index], "gather_rows", (a,), index=index)


@backward_rule("gather_rows")
def _gather_rows_backward(node, g):
    out = np.zeros(node.inputs[0].shape)
    np.add.at(out, node.saved["index"], g)
    return (out,)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(int(s) for s in shape))
    except ValueError:
        raise DimensionError(f"reshape: {a.shape} -> {tuple(shape)}") from None
    return Tensor._wrap(out, "reshape", (a,))


@backward_rule("reshape")
def _reshape_backward(node, g):
    return (g.reshape(node.inputs[0].shape),)


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a vector."""
    return concat([reshape(t, (1,)) for t in tensors], axis=0)


# --- reductions ----------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return Tensor._wrap(np.sum(a.data, axis=axis), "sum", (a,), axis=axis)


@backward_rule("sum")
def _sum_backward(node, g):
    shape = node.inputs[0].shape
    axis = node.saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# --- similarity and losses -----------------------------------------------


def normalize_rows(a: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Divide each row (last axis) by ``max(norm, eps)``."""
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    denom = np.maximum(norms, eps)
    return Tensor._wrap(a.data / denom, "normalize_rows", (a,), norms=norms, denom=denom)


@backward_rule("normalize_rows")
def _normalize_rows_backward(node, g):
    x = node.inputs[0].data
    norms, denom = node.saved["norms"], node.saved["denom"]
    active = norms >= denom  # below the eps floor the map is linear
    y = x / denom
    radial = np.sum(g * y, axis=-1, keepdims=True) * y
    return ((g - np.where(active, radial, 0.0)) / denom,)


def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """``u.v / (max(|u|, eps) * max(|v|, eps))`` for two vectors of equal length.

    Zero vectors give similarity 0 rather than an error.
    """
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape}")
    return sum(mul(normalize_rows(u, eps), normalize_rows(v, eps)))


def cosine_matrix(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` [m, d] and ``b`` [n, d]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: shapes {a.shape} and {b.shape}")
    nb = normalize_rows(b, eps)
    return matmul(normalize_rows(a, eps), transpose(nb))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return Tensor._wrap(a.data.T, "transpose", (a,))


@backward_rule("transpose")
def _transpose_backward(node, g):
    return (g.T,)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax of raw numbers (no tape)."""
    return _log_softmax(np.asarray(z, dtype=np.float64))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``.

    With a ``[R, C]`` logit matrix and ``R`` targets, returns the mean over
    rows.
    """
    num_classes = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim == 1:
        if target.ndim != 0:
            raise DimensionError("one logit vector needs a single target")
    elif logits.ndim == 2:
        if target.shape != (logits.shape[0],):
            raise DimensionError(f"{logits.shape[0]} logit rows but targets of shape {target.shape}")
    else:
        raise DimensionError(f"softmax_cross_entropy: logits of shape {logits.shape}")
    if np.any(target < 0) or np.any(target >= num_classes):
        raise IndexError(f"target {target.tolist()} out of range for {num_classes} classes")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise ContractError("non-finite logits")
    logp = _log_softmax(z)
    if logits.ndim == 1:
        value = -logp[target]
    else:
        value = -np.mean(logp[np.arange(len(target)), target])
    return Tensor._wrap(np.asarray(value), "softmax_ce", (logits,), logp=logp, target=target)


@backward_rule("softmax_ce")
def _softmax_ce_backward(node, g):
    logp, target = node.saved["logp"], node.saved["target"]
    grad = np.exp(logp)
    if grad.ndim == 1:
        grad[target] -= 1.0
    else:
        grad[np.arange(len(target)), target] -= 1.0
        grad /= len(target)
    return (grad * g,)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Smooth-L1 summed over the last axis; rows of a matrix are averaged."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: shapes {pred.shape} and {target.shape}")
    x = pred.data - target.data
    ax = np.abs(x)
    per = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    rows = 1 if pred.ndim <= 1 else pred.shape[0]
    value = per.sum() / rows
    return Tensor._wrap(np.asarray(value), "smooth_l1", (pred, target), x=x, rows=rows)


@backward_rule("smooth_l1")
def _smooth_l1_backward(node, g):
    x = node.saved["x"]
    d = np.where(np.abs(x) < 1.0, x, np.sign(x)) * (g / node.saved["rows"])
    return d, -d
