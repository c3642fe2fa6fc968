"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward op builds its result with :meth:`Tensor.from_op`, which records a
:class:`Node` (the inputs plus a vector-Jacobian rule) whenever an input
requires a gradient. :func:`backward` orders the recorded nodes into a
:class:`Tape` and walks it once in reverse.

The engine is deliberately strict:

- binary elementwise ops require identical shapes; use ``broadcast_to``
  explicitly,
- every forward result and every gradient must be finite, otherwise
  :class:`~distillkit.errors.NonFiniteError` is raised on the spot.

Tensors and tapes are confined to one thread.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from distillkit.errors import DomainError, NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Axis = Optional[Union[int, tuple[int, ...]]]
VJP = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "distillkit_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, frozen teachers)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    """Return whether forward ops currently record onto the graph."""
    return _grad_enabled.get()


def _first_non_finite(values: np.ndarray) -> float:
    return float(np.asarray(values)[~np.isfinite(values)].flat[0])


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite value produced by {what}", _first_non_finite(values))


@dataclass(eq=False)
class Node:
    """A recorded operation: its inputs and its local gradient rule."""

    op: str
    inputs: tuple["Tensor", ...]
    vjp: VJP


class Tensor:
    """An n-dimensional float64 array participating in the autodiff graph.

    Attributes:
        data: The values, float64, C-contiguous.
        requires_grad: Whether gradients flow to (or through) this tensor.
        grad: Accumulated gradient for leaves; ``None`` until the first backward.
        node: Backpointer to the op that produced this tensor, ``None`` for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and min(arr.shape) == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def from_op(
        cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], vjp: VJP
    ) -> "Tensor":
        """Wrap an op result, recording it when any input requires a gradient."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.array(data, dtype=np.float64, order="C")
        out.grad = None
        out.node = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out.node = Node(op=op, inputs=tuple(inputs), vjp=vjp)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the single value of a one-element tensor."""
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a constant tensor sharing these values, cut from the graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar over the module-level ops.
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise TypeError("tensors divide by Python scalars only")
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return broadcast_to(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    """Return ``value`` as a tensor, wrapping arrays and scalars as constants."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


############################  Elementwise  ####################################


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return Tensor.from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise difference of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor.from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return Tensor.from_op(
        a_data * b_data, "mul", (a, b), lambda g: (g * b_data, g * a_data)
    )


mul_elementwise = mul


def scalar_mul(a: ArrayLike, c: float) -> Tensor:
    """Multiply every element by the Python scalar ``c``."""
    a = as_tensor(a)
    c = float(c)
    return Tensor.from_op(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def relu(a: ArrayLike) -> Tensor:
    """Rectified linear unit; the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a: ArrayLike) -> Tensor:
    """Elementwise exponential."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor.from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    """Elementwise natural log; every input must be strictly positive."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    a_data = a.data
    return Tensor.from_op(np.log(a_data), "log", (a,), lambda g: (g / a_data,))


##############################  Linear algebra  ###############################


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    return Tensor.from_op(
        a_data @ b_data,
        "matmul",
        (a, b),
        lambda g: (g @ b_data.T, a_data.T @ g),
    )


##############################  Reductions  ###################################


def _expand_reduced(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return g


def reduce_sum(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes when ``None``)."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims), shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), vjp)


def reduce_mean(a: ArrayLike, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when ``None``)."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scalar_mul(reduce_sum(a, axes, keepdims), 1.0 / count)


def reduce_max(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Maximum over one axis (or all); the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].reshape((1,) * a.ndim if keepdims else ())
        shape = a.shape

        def vjp_all(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros(flat.shape)
            grad[idx] = float(np.asarray(g).reshape(-1)[0])
            return (grad.reshape(shape),)

        return Tensor.from_op(out, "max", (a,), vjp_all)

    (ax,) = _normalize_axes(axis, a.ndim)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, _expand_reduced(g, (ax,), keepdims), axis=ax)
        return (grad,)

    return Tensor.from_op(out, "max", (a,), vjp)


##############################  Shape ops  ####################################


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Reinterpret the row-major values under a new shape of equal size."""
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    src_shape = a.shape
    return Tensor.from_op(out, "reshape", (a,), lambda g: (g.reshape(src_shape),))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast ``a`` to ``shape`` under NumPy's rules."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src_shape = a.shape
    lead = len(shape) - len(src_shape)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        stretched = tuple(i for i, n in enumerate(src_shape) if n == 1 and g.shape[i] != 1)
        if stretched:
            g = g.sum(axis=stretched, keepdims=True)
        return (g.reshape(src_shape),)

    return Tensor.from_op(out.copy(), "broadcast_to", (a,), vjp)


##############################  Softmax  ######################################


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    """Return ``z - logsumexp(z)`` along ``axis`` with the max-subtraction trick."""
    z = as_tensor(logits)
    (ax,) = _normalize_axes(axis, z.ndim)
    shifted = z.data - z.data.max(axis=ax, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return Tensor.from_op(out, "log_softmax", (z,), vjp)


##############################  Backward  #####################################


@dataclass
class Tape:
    """Recorded ops reachable from one output, in topological order."""

    entries: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        """Collect every recorded tensor feeding ``output``, inputs before consumers."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen or tensor.node is None:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(entries=order)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Accumulate ``d(loss)/d(leaf)`` into ``grad`` of every leaf requiring grad.

    Repeated calls without :func:`zero_grad` accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DomainError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(tape.entries):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        assert tensor.node is not None
        for parent, pg in zip(tensor.node.inputs, tensor.node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"gradient of {tensor.node.op}")
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    """Zero the gradient buffer of every tensor in ``params``."""
    for p in params:
        p.grad = np.zeros_like(p.data)


##############################  Gradient oracle  ##############################


def finite_diff_gradient(
    f: Callable[[Tensor], Union[Tensor, float]], x: ArrayLike, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    Each coordinate ``i`` gets ``(f(x + h e_i) - f(x - h e_i)) / 2h``.
    """
    base = as_tensor(x).data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(values))
        value = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(value):
            raise NonFiniteError("finite-difference evaluation was not finite")
        return value

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    return Tensor(grad)
