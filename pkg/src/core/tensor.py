"""
Tensor and Reverse-Mode Differentiation

Tensors wrap immutable, contiguous numpy arrays. A Graph is an explicit tape:
operations executed inside an active Graph are recorded only when one of their
inputs is a tracked tensor (a trainable parameter or the output of a recorded
operation). backward() walks the tape in reverse and returns gradients for the
graph's trainable parameters only.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.error_handler import NonFiniteError, ShapeError

_PRECISION_LOCK = threading.Lock()
_default_dtype = np.dtype(np.float32)
_local = threading.local()

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the precision used for newly created tensors (float32 or float64)"""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {dtype}")
    with _PRECISION_LOCK:
        _default_dtype = dtype


@contextmanager
def use_precision(dtype) -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {tuple(array.shape)})")


class Tensor:
    """Immutable n-dimensional float array"""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, dtype=None, name: Optional[str] = None):
        array = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        check_finite(array, "tensor construction")
        self.data = _freeze(array)
        self.name = name

    @classmethod
    def _from_result(cls, array: np.ndarray, op: str) -> "Tensor":
        check_finite(array, op)
        tensor = cls.__new__(cls)
        tensor.data = _freeze(array)
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        from src.core import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.core import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from src.core import functional as F
        return F.add(F.scale(self, -1.0), other)

    def __mul__(self, other):
        from src.core import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from src.core import functional as F
        return F.scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only defined for scalar divisors")
        from src.core import functional as F
        return F.scale(self, 1.0 / float(other))


class Parameter(Tensor):
    """A named tensor whose value can be replaced by an optimizer"""

    __slots__ = ("trainable",)

    def __init__(self, data, dtype=None, name: Optional[str] = None, trainable: bool = True):
        super().__init__(data, dtype=dtype, name=name)
        self.trainable = trainable

    def assign(self, value) -> None:
        array = np.array(value, dtype=self.dtype, copy=True)
        if array.shape != self.shape:
            raise ShapeError(f"Cannot assign shape {array.shape} to parameter {self.name} of shape {self.shape}")
        check_finite(array, f"update of {self.name}")
        self.data = _freeze(array)

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:
        return self is other


class _Node:
    __slots__ = ("output", "parents", "backward_fn", "op")

    def __init__(self, output: Tensor, parents: Tuple, backward_fn: BackwardFn, op: str):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Graph:
    """
    Explicit gradient tape bound to a set of trainable parameters

    Usage:
        with Graph(model.trainable_parameters()) as graph:
            loss = ...
        grads = backward(loss, graph)
    """

    def __init__(self, trainable: Iterable[Parameter] = ()):
        self.trainable: List[Parameter] = [p for p in trainable]
        self._tracked = {id(p) for p in self.trainable}
        self._nodes: List[_Node] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _local.graphs.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def operations(self) -> List[str]:
        return [node.op for node in self._nodes]

    def tracks(self, tensor) -> bool:
        return isinstance(tensor, Tensor) and id(tensor) in self._tracked

    def record(self, output: Tensor, parents: Tuple, backward_fn: BackwardFn, op: str) -> None:
        self._nodes.append(_Node(output, parents, backward_fn, op))
        self._tracked.add(id(output))


def active_graph() -> Optional[Graph]:
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


def record(output: Tensor, parents: Tuple, backward_fn: BackwardFn, op: str) -> Tensor:
    """Record an operation on the active graph when any parent is tracked"""
    graph = active_graph()
    if graph is not None and any(graph.tracks(p) for p in parents):
        graph.record(output, parents, backward_fn, op)
    return output


def backward(loss: Tensor, graph: Graph) -> Dict[Parameter, np.ndarray]:
    """
    Reverse-mode pass over a recorded graph

    Args:
        loss: Scalar tensor produced inside the graph
        graph: The tape the loss was computed under

    Returns:
        Mapping from each trainable parameter to its gradient. Parameters the
        loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() requires a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph._nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        needs = tuple(graph.tracks(p) for p in node.parents)
        parent_grads = node.backward_fn(upstream, needs)
        for parent, needed, grad in zip(node.parents, needs, parent_grads):
            if not needed or grad is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad

    result: Dict[Parameter, np.ndarray] = {}
    for param in graph.trainable:
        grad = grads.get(id(param))
        if grad is None:
            grad = np.zeros_like(param.data)
        grad = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
        check_finite(grad, f"gradient of {param.name}")
        result[param] = grad
    return result
