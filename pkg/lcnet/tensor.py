"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a contiguous numpy array in batch, channel, row, column order.
Operations on tensors that require gradients record a ``TapeNode``; ``backward``
replays the recorded nodes in reverse creation order and accumulates gradients
into leaf tensors.
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
from numpy.typing import ArrayLike

from .const import DEFAULT_DTYPE
from .errors import NumericError, ShapeError, TapeError

_LOGGER = logging.getLogger(__name__)

_SEQUENCE = itertools.count()
_STATE = threading.local()

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def is_grad_enabled() -> bool:
    """Return whether new operations are recorded on the tape in this thread."""
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the enclosed block."""
    previous = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@dataclass(eq=False)
class TapeNode:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    saved: dict[str, Any]
    backward_fn: BackwardFn
    seq: int = field(default_factory=lambda: next(_SEQUENCE))
    consumed: bool = False


class Tensor:
    """Dense N-dimensional array participating in the gradient tape."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: np.dtype | str | None = None,
        node: TapeNode | None = None,
    ) -> None:
        """Initialize the tensor."""
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = node

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the extents."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Return the number of axes."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Return the number of elements."""
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        """Return the element type."""
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """Return True when the tensor was not produced by a recorded operation."""
        return self._node is None

    @property
    def node(self) -> TapeNode | None:
        """Return the tape node that produced this tensor."""
        return self._node

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.size != 1:
            raise ShapeError("item", self.shape, detail="tensor has more than one element")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """Return a tensor sharing data but cut from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        """Reset the accumulated gradient."""
        self.grad = None

    def is_finite(self) -> bool:
        """Return True when every stored value is finite."""
        return bool(np.isfinite(self.data).all())

    def assert_finite(self, where: str) -> Tensor:
        """Raise NumericError if any value is NaN or Inf."""
        if not self.is_finite():
            count = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NumericError(where, count)
        return self

    def _accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError("accumulate_grad", self.shape, grad.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def sum(self) -> Tensor:
        """Sum of all elements."""
        return sum_all(self)

    def mean(self) -> Tensor:
        """Mean of all elements."""
        return mean_all(self)

    def reshape(self, *shape: int) -> Tensor:
        """Return a reshaped view recorded on the tape."""
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays, stash whatever ``backward``
    needs in ``self.saved`` and return one gradient (or None) per tensor input.
    """

    op: ClassVar[str] = "function"

    def __init__(self) -> None:
        """Initialize the function."""
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        """Compute the output array."""
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        """Return input gradients given the output gradient."""
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """Run the forward pass and record a tape node when needed."""
        fn = cls()
        out = fn.forward(*(tensor.data for tensor in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(tensor.requires_grad for tensor in inputs)
        node = TapeNode(cls.op, inputs, fn.saved, fn.backward) if requires_grad else None
        return Tensor(out, requires_grad=requires_grad, node=node)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every leaf that requires grad."""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if not loss.requires_grad:
            raise TapeError("loss is not connected to any tensor that requires grad")
        loss._accumulate_grad(seed)
        return

    # Collect every non-leaf tensor reachable from the loss.
    pending: list[Tensor] = [loss]
    reachable: dict[int, Tensor] = {}
    while pending:
        tensor = pending.pop()
        node = tensor.node
        if node is None or id(tensor) in reachable:
            continue
        if node.consumed:
            raise TapeError(f"tape already consumed at '{node.op}'")
        reachable[id(tensor)] = tensor
        pending.extend(inp for inp in node.inputs if inp.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    ordered = sorted(
        reachable.values(), key=lambda t: t.node.seq, reverse=True  # type: ignore[union-attr]
    )
    for tensor in ordered:
        node = tensor.node
        assert node is not None
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        for inp, inp_grad in zip(node.inputs, node.backward_fn(grad), strict=True):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp._accumulate_grad(inp_grad)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + inp_grad
            else:
                grads[id(inp)] = inp_grad

    for tensor in ordered:
        node = tensor.node
        assert node is not None
        node.consumed = True
        node.saved.clear()
    _LOGGER.debug("Backward pass replayed %d tape nodes", len(ordered))


def zero_grads(tensors: Iterator[Tensor] | list[Tensor]) -> None:
    """Reset the gradients of the given leaves."""
    for tensor in tensors:
        tensor.zero_grad()


def as_tensor(value: Tensor | ArrayLike, like: Tensor | None = None) -> Tensor:
    """Wrap constants as non-differentiable tensors of a matching dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if b.shape != a.shape and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


class _Add(Function):
    op = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["b_shape"] = b.shape
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, _reduce_to(grad, self.saved["b_shape"])


class _Sub(Function):
    op = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["b_shape"] = b.shape
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return grad, -_reduce_to(grad, self.saved["b_shape"])


class _Mul(Function):
    op = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["a"] = a
        self.saved["b"] = b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.saved["a"], self.saved["b"]
        return grad * b, _reduce_to(grad * a, b.shape)


class _BroadcastMul(Function):
    op = "broadcast_mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        expanded = b.reshape(b.shape + (1,) * (a.ndim - b.ndim))
        self.saved["a"] = a
        self.saved["b"] = expanded
        self.saved["b_shape"] = b.shape
        return a * expanded

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, expanded = self.saved["a"], self.saved["b"]
        trailing = tuple(range(len(self.saved["b_shape"]), a.ndim))
        grad_b = (grad * a).sum(axis=trailing) if trailing else grad * a
        return grad * expanded, grad_b.reshape(self.saved["b_shape"])


class _Neg(Function):
    op = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (-grad,)


class _Abs(Function):
    op = "abs"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["sign"] = np.sign(a)
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.saved["sign"],)


class _SumAll(Function):
    op = "sum"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


class _MeanAll(Function):
    op = "mean"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        shape = self.saved["shape"]
        count = max(int(np.prod(shape)), 1)
        return (np.broadcast_to(grad / count, shape).copy(),)


class _Reshape(Function):
    op = "reshape"

    def forward(self, a: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.saved["shape"]),)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise sum; ``b`` must match ``a`` or be a scalar."""
    b = as_tensor(b, like=a)
    _check_elementwise("add", a, b)
    return _Add.apply(a, b)


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise difference; ``b`` must match ``a`` or be a scalar."""
    b = as_tensor(b, like=a)
    _check_elementwise("sub", a, b)
    return _Sub.apply(a, b)


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise product; a scalar ``b`` gives scalar multiplication."""
    b = as_tensor(b, like=a)
    _check_elementwise("mul", a, b)
    return _Mul.apply(a, b)


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Multiply ``a`` by ``b`` broadcast over trailing axes.

    ``b``'s shape must be a leading prefix of ``a``'s shape: a length-C vector
    scales each channel of a C×H×W map, an (N, C) matrix scales each channel of
    each instance of an N×C×H×W batch and an (N,) vector scales whole instances.
    """
    if b.ndim > a.ndim or a.shape[: b.ndim] != b.shape:
        raise ShapeError("broadcast_mul", a.shape, b.shape, detail="b must prefix a")
    return _BroadcastMul.apply(a, b)


def neg(a: Tensor) -> Tensor:
    """Elementwise negation."""
    return _Neg.apply(a)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value."""
    return _Abs.apply(a)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return _SumAll.apply(a)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor."""
    return _MeanAll.apply(a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reshape keeping element order."""
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return _Reshape.apply(a, shape=tuple(shape))
