"""Dense float64 tensors with define-by-run reverse-mode autodiff."""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

# op kinds a graph node may carry
OP_KINDS = (
    "linear",
    "conv2d",
    "relu",
    "maxpool2d",
    "batchnorm2d",
    "elementwise-add",
    "elementwise-mul",
    "scale",
    "reshape",
    "channel-slice",
    "reduce-sum",
    "softmax-cross-entropy",
    "soft-cross-entropy",
    "fake-quantize",
)

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not fit together."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class BackwardError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A nonfinite value reached a place that aborts the run."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array that can take part in a computation graph.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape. Gradients accumulate across ``backward`` calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "kind", "_parents", "_op", "_attrs", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        kind: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        # "weight" or "quant" for trainable leaves; decides the optimizer
        self.kind = kind
        self._parents: tuple[Tensor, ...] = ()
        self._op: Optional[str] = None
        self._attrs: dict = {}
        self._backward: Optional[Callable] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        op: str,
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
        **attrs,
    ) -> "Tensor":
        """Wrap an op result, recording the node only if some parent needs grad."""
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._op = op
            out._attrs = attrs
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    @property
    def op(self) -> Optional[str]:
        return self._op

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op})"

    def __add__(self, other):
        from .ops import add

        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._op is None:
            if not self.requires_grad:
                raise BackwardError("no graph recorded for this tensor; run a forward pass that involves trainable inputs first")
            self.grad = self.grad + np.ones_like(self.data)
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order
