"""Dense float64 tensors with a recorded reverse-mode gradient graph.

Every operation in this module (and in :mod:`crossing_tool.kernels`) builds a
new :class:`Tensor` whose ``node`` remembers the operation name, its inputs and
a vector-Jacobian product.  :func:`backward` walks that graph from a scalar
output and accumulates ``grad`` on every reachable leaf.

Shapes never broadcast implicitly: binary elementwise operations accept equal
shapes, or one 0-d operand.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """Raised when an operation receives NaN or infinite input."""


class GraphError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated as requested."""


_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("recording", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording graph nodes."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get()


Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    vjp: Vjp


class Tensor:
    __slots__ = ("data", "grad", "node", "name")

    def __init__(self, data, *, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        origin = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{label}{origin})"

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce_sum(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out.node = Node(op, inputs, vjp) if _recording.get() else None
    return out


def _first_mismatch(a: tuple[int, ...], b: tuple[int, ...]) -> str:
    if len(a) != len(b):
        return f"rank {len(a)} vs {len(b)}"
    for axis, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return f"axis {axis} ({x} vs {y})"
    return "none"


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(
        f"{op}: shapes {a.shape} and {b.shape} differ at {_first_mismatch(a.shape, b.shape)}; "
        "implicit broadcasting is not supported"
    )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# Elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _result(x.data * factor, "scale", (x,), lambda g: (g * factor,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), "clamp", (x,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"Unknown elementwise op '{op}'. Use one of: {', '.join(_ELEMENTWISE)}") from None
    return fn(*args)


# Reductions and shape operations


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _result(
            np.asarray(x.data.sum()),
            "sum",
            (x,),
            lambda g: (np.broadcast_to(g, x.shape),),
        )
    axis = axis % x.ndim
    return _result(
        x.data.sum(axis=axis),
        "sum",
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape),),
    )


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(reduce_sum(x), 1.0 / x.size)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x, start_axis: int = 0) -> Tensor:
    x = as_tensor(x)
    return reshape(x, x.shape[:start_axis] + (-1,))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def index(x, key) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(key)

    def vjp(g: np.ndarray):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), "index", (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise ShapeError("concat: cannot concatenate 0-d tensors")
    axis = axis % ndim
    ref = tensors[0].shape
    for pos, t in enumerate(tensors[1:], start=1):
        if t.ndim != ndim:
            raise ShapeError(f"concat: tensor {pos} has rank {t.ndim}, expected {ndim}")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != ref[ax]:
                raise ShapeError(
                    f"concat: tensor {pos} has extent {t.shape[ax]} on axis {ax}, expected {ref[ax]}"
                )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat",
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: needs at least one tensor")
    ref = tensors[0].shape
    for pos, t in enumerate(tensors[1:], start=1):
        if t.shape != ref:
            raise ShapeError(f"stack: tensor {pos} differs at {_first_mismatch(t.shape, ref)}")
    axis = axis % (len(ref) + 1)
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        "stack",
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def split(x, sections: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Slice ``x`` along ``axis`` into equal parts or parts of the given sizes."""
    x = as_tensor(x)
    axis = axis % x.ndim
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections < 1 or extent % sections:
            raise ShapeError(f"split: axis {axis} extent {extent} is not divisible into {sections} parts")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ShapeError(f"split: sizes {sizes} do not sum to extent {extent} on axis {axis}")
    parts = []
    start = 0
    for size in sizes:
        key = (slice(None),) * axis + (slice(start, start + size),)
        parts.append(index(x, key))
        start += size
    return parts


def _parse_subscripts(subscripts: str, count: int) -> tuple[list[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise ShapeError(f"einsum: explicit output without ellipsis required, got '{subscripts}'")
    lhs, out = subscripts.replace(" ", "").split("->")
    terms = lhs.split(",")
    if len(terms) != count:
        raise ShapeError(f"einsum: {len(terms)} subscripts for {count} operands")
    for term in terms + [out]:
        if len(set(term)) != len(term):
            raise ShapeError(f"einsum: repeated index within '{term}' is not supported")
    return terms, out


def einsum(subscripts: str, *operands) -> Tensor:
    tensors = tuple(as_tensor(t) for t in operands)
    terms, out_term = _parse_subscripts(subscripts, len(tensors))
    for term, t in zip(terms, tensors):
        if len(term) != t.ndim:
            raise ShapeError(f"einsum: subscript '{term}' does not match operand shape {t.shape}")
    data = np.einsum(subscripts, *(t.data for t in tensors), optimize=True)

    def vjp(g: np.ndarray):
        grads = []
        for k, (term, t) in enumerate(zip(terms, tensors)):
            others = [(terms[j], tensors[j].data) for j in range(len(tensors)) if j != k]
            available = set(out_term).union(*(set(s) for s, _ in others))
            target = "".join(c for c in term if c in available)
            expr = ",".join([out_term] + [s for s, _ in others]) + "->" + target
            gk = np.einsum(expr, g, *(d for _, d in others), optimize=True)
            if target != term:
                kept = [t.shape[i] if c in available else 1 for i, c in enumerate(term)]
                gk = np.broadcast_to(gk.reshape(kept), t.shape)
            grads.append(gk)
        return tuple(grads)

    return _result(np.asarray(data), "einsum", tensors, vjp)


# Reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    pending: list[tuple[Tensor, bool]] = [(root, False)]
    while pending:
        tensor, expanded = pending.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        pending.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if id(parent) not in visited:
                    pending.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``grad`` of every leaf reachable from ``output``."""
    if output.data.size != 1:
        raise GraphError(f"backward() needs a scalar output, got shape {output.shape}")
    pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for tensor in reversed(_topological_order(output)):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            tensor.grad = np.array(g, dtype=np.float64) if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.vjp(g)):
            if pg is None:
                continue
            if pg.shape != parent.shape:
                raise GraphError(
                    f"{tensor.node.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                )
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# Finite differences


def numerical_gradient(
    fn: Callable[[], Tensor],
    target: Tensor,
    *,
    eps: float = 1e-5,
    entries: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``target``; NaN where not sampled."""
    result = np.full(target.shape, np.nan)
    positions = entries if entries is not None else list(np.ndindex(*target.shape))
    with no_grad():
        for pos in positions:
            saved = target.data[pos]
            target.data[pos] = saved + eps
            up = fn().item()
            target.data[pos] = saved - eps
            down = fn().item()
            target.data[pos] = saved
            result[pos] = (up - down) / (2.0 * eps)
    return result


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest relative disagreement over the entries ``numeric`` sampled."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a, n = analytic[mask], numeric[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    *,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> float:
    """Compare backward() against central differences; return the worst relative error.

    ``floor`` bounds the relative-error denominator from below so entries whose
    true gradient is zero compare on an absolute scale.
    """
    for t in tensors:
        t.zero_grad()
    backward(fn())
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        positions = list(np.ndindex(*t.shape))
        if max_entries is not None and len(positions) > max_entries:
            picks = rng.choice(len(positions), size=max_entries, replace=False)
            positions = [positions[i] for i in sorted(picks)]
        numeric = numerical_gradient(fn, t, eps=eps, entries=positions)
        worst = max(worst, gradient_error(t.grad, numeric, floor))
    return worst
