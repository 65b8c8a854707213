"""
Dense NCHW tensor with define-by-run reverse-mode differentiation.

Every differentiable primitive in `canseg.tensor.ops` produces a Tensor that
remembers its parents and a closure mapping the output gradient to one
gradient per parent. `Graph.from_loss` orders those records topologically and
`Graph.backward` sweeps them in reverse, accumulating into `.grad`.
"""

from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from canseg.core.errors import BackwardError, PrecisionError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)

    @classmethod
    def of(cls, dtype: np.dtype) -> "Precision":
        if dtype == np.float64:
            return cls.F64
        if dtype == np.float32:
            return cls.F32
        raise PrecisionError(f"unsupported dtype {dtype}")


_grad_enabled: ContextVar[bool] = ContextVar("canseg_grad_enabled", default=True)
_active_tracer: ContextVar[Optional["CostTracer"]] = ContextVar("canseg_cost_tracer", default=None)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (inference and finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class CostTracer:
    """Collects per-primitive FLOP counts reported by ops executed inside the context."""

    MAC_KINDS = frozenset({"conv2d", "matmul"})

    def __init__(self) -> None:
        self.flops = 0
        self.madd = 0
        self.by_kind: Counter = Counter()

    def record(self, kind: str, flops: int) -> None:
        self.flops += flops
        self.madd += 2 * flops if kind in self.MAC_KINDS else flops
        self.by_kind[kind] += flops

    def __enter__(self) -> "CostTracer":
        self._token = _active_tracer.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tracer.reset(self._token)


def trace_cost(kind: str, flops: int) -> None:
    tracer = _active_tracer.get()
    if tracer is not None:
        tracer.record(kind, int(flops))


class Tensor:
    """Rank-4 NCHW array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, precision: Optional[Precision] = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(precision.dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 NCHW, got shape {arr.shape}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(cls, op: str, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=track)
        if track:
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, precision: Precision) -> "Tensor":
        return Tensor(self.data.astype(precision.dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        Graph.from_loss(self).backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision.value}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from canseg.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from canseg.tensor import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from canseg.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from canseg.tensor import ops
        return ops.scale(self, -1.0)


class Graph:
    """Ordered record of executed differentiable ops; producers precede consumers."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into `t.grad` for every tracked tensor t."""
        if loss.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise BackwardError("loss is not connected to any tensor that requires grad")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)
