"""Dense tensors with tape-based reverse-mode differentiation.

Every operation records its inputs and a backward rule on the output node.
Calling :meth:`Tensor.backward` on a scalar walks the tape once in reverse
topological order and accumulates gradients into every leaf that was created
with ``requires_grad=True``.  A tape can be differentiated only once; the
intermediate nodes release their closures afterwards.

Any NaN or Inf produced by a forward or backward rule raises
:class:`NonFiniteError` naming the operation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "DimensionError",
    "DomainError",
    "BackwardError",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "maximum",
    "elementwise",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "tensor_max",
    "take",
    "scatter_rows",
    "numerical_gradient",
]

_DEFAULT_DTYPE = np.dtype(np.float32)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class BackwardError(RuntimeError):
    """Raised for misuse of the backward pass."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(array: np.ndarray, op: str, stage: str = "forward") -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite value produced in {stage} of '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the differentiation tape.

    Parameters
    ----------
    data : array_like
        Values; converted to the default floating dtype unless ``dtype`` is given.
    requires_grad : bool
        Leaf flag. Gradients accumulate into ``grad`` across backward calls
        until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        needs = any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, grad: np.ndarray, op: str) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad), self.data.shape)
        _check_finite(grad, op, "backward")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -- array-like surface ---------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tensor_max(self, axis, keepdims)

    # -- backward ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise BackwardError(f"backward requires a scalar root, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward already ran on this tape")
        if not self.requires_grad:
            raise BackwardError("root does not depend on any tensor requiring gradients")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype, op="const")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch dimensions; ``b`` is 1-D or 2-D.
    Backward: dA = G·Bᵀ, dB = Aᵀ·G (batch dimensions summed into dB).
    """
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            if a.requires_grad:
                a._accumulate(g[..., None] * b.data, "matmul")
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1), "matmul")
            return
        if a.requires_grad:
            a._accumulate(g @ b.data.T, "matmul")
        if b.requires_grad:
            k, n = b.shape
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n), "matmul")

    return Tensor._from_op(out, (a, b), "matmul", backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse), "transpose")

    return Tensor._from_op(out, (a,), "transpose", backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape), "reshape")

    return Tensor._from_op(out, (a,), "reshape", backward)


# -- elementwise family -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")

    def backward(g):
        a._accumulate(g, "add")
        b._accumulate(g, "add")

    return Tensor._from_op(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        a._accumulate(g, "sub")
        b._accumulate(-g, "sub")

    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    """Hadamard (elementwise) product."""
    a, b = _pair(a, b)
    _broadcast_check(a, b, "hadamard")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data, "hadamard")
        if b.requires_grad:
            b._accumulate(g * a.data, "hadamard")

    return Tensor._from_op(a.data * b.data, (a, b), "hadamard", backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / b.data, "div")
        if b.requires_grad:
            b._accumulate(-g * out / b.data, "div")

    return Tensor._from_op(out, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g, "neg")

    return Tensor._from_op(-a.data, (a,), "neg", backward)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function 1/(1+e^{-x}), evaluated as 0.5·(1+tanh(x/2)) to avoid overflow."""
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accumulate(g * out * (1.0 - out), "sigmoid")

    return Tensor._from_op(out, (a,), "sigmoid", backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out), "tanh")

    return Tensor._from_op(out, (a,), "tanh", backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out, "exp")

    return Tensor._from_op(out, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data, "log")

    return Tensor._from_op(out, (a,), "log", backward)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; on ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    _broadcast_check(a, b, "max")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        a._accumulate(np.where(pick_a, g, 0.0), "max")
        b._accumulate(np.where(pick_a, 0.0, g), "max")

    return Tensor._from_op(out, (a, b), "max", backward)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "hadamard": mul, "mul": mul, "div": div, "max": maximum}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name over the elementwise family."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](as_tensor(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- normalisation ------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax: empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)), "softmax")

    return Tensor._from_op(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax: empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True), "log_softmax")

    return Tensor._from_op(out, (a,), "log_softmax", backward)


# -- structural ---------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece, "concat")

    return Tensor._from_op(out, tensors, "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis), "stack")

    return Tensor._from_op(out, tensors, "stack", backward)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if not a.requires_grad:
            return
        _check_finite(g, "slice", "backward")
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(a.grad, index, g)
        else:
            a.grad[index] += g

    return Tensor._from_op(out, (a,), "slice", backward)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape), "sum")

    return Tensor._from_op(out, (a,), "sum", backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if count == 0:
        raise DimensionError("mean: empty reduction")
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape), "mean")

    return Tensor._from_op(out, (a,), "mean", backward)


def tensor_max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max-reduce; gradient flows to the first maximal entry."""
    if a.size == 0:
        raise DimensionError("max-reduce: empty input")
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = np.asarray(flat[idx])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def backward(g):
            full = np.zeros(a.size, dtype=a.dtype)
            full[idx] = g.reshape(-1)[0]
            a._accumulate(full.reshape(a.shape), "max-reduce")

        return Tensor._from_op(out, (a,), "max-reduce", backward)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        a._accumulate(full, "max-reduce")

    return Tensor._from_op(out, (a,), "max-reduce", backward)


def take(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D ``table`` by integer ``ids`` (embedding lookup).

    Backward scatters into the gathered rows only.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("take: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        _check_finite(g, "embedding-gather", "backward")
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))

    return Tensor._from_op(out, (table,), "embedding-gather", backward)


def scatter_rows(rows: Tensor, index, n: int) -> Tensor:
    """Place ``rows[i]`` at position ``index[i]`` of an otherwise zero (n, ...) tensor."""
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n,) + rows.shape[1:], dtype=rows.dtype)
    out[index] = rows.data

    def backward(g):
        rows._accumulate(g[index], "scatter")

    return Tensor._from_op(out, (rows,), "scatter", backward)


# -- finite differences -------------------------------------------------------------

def numerical_gradient(f: Callable[[], float], tensors: Iterable[Tensor],
                       step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar callable ``f`` w.r.t. each tensor's data.

    ``f`` must rebuild its tape from the tensors' current values on each call.
    """
    grads = []
    for t in tensors:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads
