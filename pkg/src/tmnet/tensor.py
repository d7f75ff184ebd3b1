"""Dense tensor type and the reverse-mode tape behind it.

Every differentiable op creates a :class:`Node` carrying a monotonically
increasing id, the op's input tensors and a closure that maps the output
gradient to input gradients. :func:`backward` walks the nodes reachable
from the loss in strict reverse creation order and frees each node as it
goes, so a second backward through the same graph is rejected.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """An op or model was configured with inconsistent arguments."""


class TapeError(RuntimeError):
    """Backward was requested on a graph that cannot be differentiated."""


_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "out_shape", "freed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, out_shape: tuple):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_shape = out_shape
        self.freed = False

    def free(self) -> None:
        self.inputs = ()
        self.backward_fn = None
        self.freed = True

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, freed={self.freed})"


def _coerce(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and data.dtype in DTYPES:
        arr = data
    else:
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
    if arr.dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Immutable n-d array of float32/float64 values.

    ``grad`` is only populated on leaf tensors that require gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _coerce(data, dtype)
        if arr is data:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in tmnet.ops.
    def __add__(self, other):
        from tmnet import ops

        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from tmnet import ops

        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __mul__(self, other):
        from tmnet import ops

        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from tmnet import ops

        return ops.scalar_mul(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=dtype), False)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a tensor, appending a tape node when any input needs grad."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        result.node = Node(op, tuple(inputs), backward_fn, result.data.shape)
    return result


def check_same_dtype(*tensors: Tensor) -> None:
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise TypeError(f"dtype mismatch between operands: {sorted(str(d) for d in dts)}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss.node.freed:
        raise TapeError("tape already consumed by a previous backward(); rebuild the graph")

    nodes: dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        if node.freed:
            raise TapeError(f"graph references freed node {node!r}")
        nodes[node.id] = node
        for t in node.inputs:
            if t.requires_grad and t.node is not None and t.node.id not in nodes:
                stack.append(t.node)

    grads: dict[int, np.ndarray] = {loss.node.id: seed}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is not None:
            if g.shape != node.out_shape:
                raise TapeError(f"{node.op}: gradient shape {g.shape} != output shape {node.out_shape}")
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(t.node.id)
                    grads[t.node.id] = gi if prev is None else prev + gi
        node.free()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
