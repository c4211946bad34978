"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation goes through :func:`record`, which runs the
forward kernel and, when any input requires a gradient, appends a node to the
active :class:`Tape`. :func:`backward` replays the tape in exact reverse
recording order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class Tensor:
    """A dense array that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "id", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name
        self._leaf = True

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


# --- tape -------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_state = {"tape": Tape(), "grad_enabled": True, "guided": False}


def get_tape() -> Tape:
    return _state["tape"]


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = _state["tape"]
    _state["tape"] = tape
    try:
        yield tape
    finally:
        _state["tape"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def guided_rectifiers():
    """Within this context rectifier backward passes follow the guided rule."""
    prev = _state["guided"]
    _state["guided"] = True
    try:
        yield
    finally:
        _state["guided"] = prev


def is_guided() -> bool:
    return _state["guided"]


def record(op_kind: str, inputs: Sequence[Tensor], forward_fn) -> Tensor:
    """Run ``forward_fn`` on the input arrays and record the op if needed.

    ``forward_fn(*arrays)`` must return ``(out_array, backward_fn)`` where
    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    out_data, backward_fn = forward_fn(*(t.data for t in inputs))
    needs = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        out._leaf = False
        _state["tape"].append(Node(op_kind, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, retain_intermediate: bool = False) -> None:
    """Populate ``.grad`` on every tensor that requires it, then reset the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state["tape"]
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    touched: list[Tensor] = []
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.kind}.backward", g.shape, inp.shape)
            g = g.astype(inp.dtype, copy=False)
            if inp.grad is None:
                inp.grad = np.array(g, copy=True)
            else:
                inp.grad = inp.grad + g
        if not retain_intermediate and node.output is not loss:
            touched.append(node.output)
    if not retain_intermediate:
        for t in touched:
            t.grad = None
    tape.reset()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --- broadcasting helpers ----------------------------------------------------


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    def fwd(x, y):
        _check_broadcast("add", x, y)
        return x + y, lambda g: (unbroadcast(g, x.shape), unbroadcast(g, y.shape))

    return record("add", (a, b), fwd)


def sub(a, b) -> Tensor:
    def fwd(x, y):
        _check_broadcast("sub", x, y)
        return x - y, lambda g: (unbroadcast(g, x.shape), unbroadcast(-g, y.shape))

    return record("sub", (a, b), fwd)


def mul(a, b) -> Tensor:
    def fwd(x, y):
        _check_broadcast("mul", x, y)
        return x * y, lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape))

    return record("mul", (a, b), fwd)


def div(a, b) -> Tensor:
    def fwd(x, y):
        _check_broadcast("div", x, y)
        out = x / y
        return out, lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * out / y, y.shape))

    return record("div", (a, b), fwd)


def neg(a) -> Tensor:
    return record("neg", (a,), lambda x: (-x, lambda g: (-g,)))


def power(a, exponent: float) -> Tensor:
    def fwd(x):
        return x**exponent, lambda g: (g * exponent * x ** (exponent - 1),)

    return record(f"pow{exponent}", (a,), fwd)


def exp(a) -> Tensor:
    def fwd(x):
        out = np.exp(x)
        return out, lambda g: (g * out,)

    return record("exp", (a,), fwd)


def log(a) -> Tensor:
    return record("log", (a,), lambda x: (np.log(x), lambda g: (g / x,)))


def sqrt(a) -> Tensor:
    def fwd(x):
        out = np.sqrt(x)
        return out, lambda g: (g * 0.5 / out,)

    return record("sqrt", (a,), fwd)


def tanh(a) -> Tensor:
    def fwd(x):
        out = np.tanh(x)
        return out, lambda g: (g * (1.0 - out * out),)

    return record("tanh", (a,), fwd)


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    # At exactly 0 the left branch (slope alpha) is taken.
    guided = is_guided()

    def fwd(x):
        pos = x > 0
        out = np.where(pos, x, x * x.dtype.type(alpha))

        def bwd(g):
            if guided:
                return (np.where(pos & (g > 0), g, 0).astype(g.dtype),)
            return (np.where(pos, g, g * g.dtype.type(alpha)),)

        return out, bwd

    return record("relu" if alpha == 0 else "leaky_relu", (a,), fwd)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; the subgradient at the kink is 0."""

    def fwd(x):
        keep = x > floor
        return np.where(keep, x, x.dtype.type(floor)), lambda g: (np.where(keep, g, 0).astype(g.dtype),)

    return record("clip_min", (a,), fwd)


# --- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    def fwd(x):
        out = np.sum(x, axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return np.asarray(out), bwd

    return record("sum", (a,), fwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    def fwd(x):
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", x.shape, shape) from None
        return out, lambda g: (g.reshape(x.shape),)

    return record("reshape", (a,), fwd)


def transpose(a, axes=None) -> Tensor:
    def fwd(x):
        ax = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        inv = np.argsort(ax)
        return np.transpose(x, ax), lambda g: (np.transpose(g, inv),)

    return record("transpose", (a,), fwd)


def getitem(a, index) -> Tensor:
    def fwd(x):
        out = x[index]

        def bwd(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return (full,)

        return np.array(out, copy=True), bwd

    return record("getitem", (a,), fwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def fwd(*xs):
        ref = xs[0]
        ax = axis % ref.ndim
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                x.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
            ):
                raise ShapeError("concat", *(y.shape for y in xs))
        out = np.concatenate(xs, axis=ax)
        bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return out, lambda g: tuple(np.split(g, bounds, axis=ax))

    return record("concat", tensors, fwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, _expand_shape(as_tensor(t).shape, axis)) for t in tensors], axis=axis)


def _expand_shape(shape, axis):
    shape = list(shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return tuple(shape)


def matmul(a, b) -> Tensor:
    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError("matmul", x.shape, y.shape)
        return x @ y, lambda g: (g @ y.T, x.T @ g)

    return record("matmul", (a, b), fwd)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must occur in the other operand or the output."""
    lhs, out_spec = subscripts.replace(" ", "").split("->")
    a_spec, b_spec = lhs.split(",")
    for own, other in ((a_spec, b_spec), (b_spec, a_spec)):
        loose = set(own) - set(other) - set(out_spec)
        if loose:
            raise ValueError(f"einsum index {sorted(loose)} is summed inside a single operand")

    def fwd(x, y):
        try:
            out = np.einsum(f"{a_spec},{b_spec}->{out_spec}", x, y, optimize=True)
        except ValueError:
            raise ShapeError(f"einsum[{subscripts}]", x.shape, y.shape) from None

        def bwd(g):
            ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, y, optimize=True)
            gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, x, optimize=True)
            return ga, gb

        return out, bwd

    return record("einsum", (a, b), fwd)


# --- verification oracle -----------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(base.copy()))
        flat[i] = orig - eps
        lo = float(f(base.copy()))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||, floor)``; 0 when both vanish.

    ``floor`` turns the comparison absolute for gradients that are identically
    zero (e.g. a conv bias feeding a batch norm), where the numeric side is pure
    round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
