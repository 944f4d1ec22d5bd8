"""Dense float64 tensors with a dynamic reverse-mode tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


# op kind -> rule(node, grad_of_output) -> sequence of input grads (None = no grad)
BACKWARD_RULES: dict[str, Callable[["TapeNode", np.ndarray], Any]] = {}


def backward_rule(kind: str):
    def register(fn):
        BACKWARD_RULES[kind] = fn
        return fn

    return register


@dataclass(eq=False)
class TapeNode:
    kind: str
    inputs: tuple["Tensor", ...]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """A dense float64 array that may participate in the gradient tape.

    Data is always copied on construction, so a tensor never shares its
    buffer with the caller or with another tensor.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, kind: str, inputs: tuple["Tensor", ...], **saved) -> "Tensor":
        out = cls.__new__(cls)
        out._data = np.asarray(arr, dtype=np.float64)
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = TapeNode(kind, inputs, saved) if out.requires_grad else None
        out.grad = None
        return out

    @property
    def data(self) -> np.ndarray:
        # read-only view; callers must copy to mutate
        view = self._data.view()
        view.flags.writeable = False
        return view

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def __len__(self) -> int:
        return self._data.shape[0]

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def assign(self, values) -> None:
        """Overwrite the values of a leaf tensor in place (optimizer use)."""
        if self.node is not None:
            raise ContractError("assign() is only valid on leaf tensors")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.shape:
            raise DimensionError(f"cannot assign shape {values.shape} into {self.shape}")
        self._data = values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self._data!r}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(_as_tensor(other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _as_tensor(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _as_tensor(other))

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss into every reachable leaf.

    Leaf gradients accumulate into ``.grad`` (call ``zero_grad`` between
    steps). Gradients of shared subexpressions sum over all paths.
    """
    if loss.shape not in ((), (1,)):
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss._data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        rule = BACKWARD_RULES[t.node.kind]
        in_grads = rule(t.node, g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"backward rule '{t.node.kind}' produced grad {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
