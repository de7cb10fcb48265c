"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive that touches a gradient-tracking input appends a node to the
active tape.  Nodes are recorded in creation order, which is already a valid
topological order, so :func:`backward` is a single reverse sweep.  The tape
is thread-local and is consumed (cleared) by ``backward``.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one of them must be a scalar (a Python number or a 0-d tensor).  Everything
else raises :class:`ShapeError`.  Row-wise bias addition and row tiling are
explicit primitives (:func:`linear`, :func:`repeat_rows`).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "get_tape",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "matmul",
    "linear",
    "nonlinearity",
    "NONLINEARITIES",
    "reshape",
    "concat",
    "repeat_rows",
    "normalize_rows",
    "tensor_sum",
    "tensor_mean",
    "sq_l2_norm",
    "cosine_similarity",
    "cosine_similarity_rows",
    "detach",
    "backward",
    "AdamState",
    "adamw_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """A float64 array with optional gradient tracking.

    ``data`` is treated as immutable once the tensor exists; only ``grad`` is
    ever written after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive applications on gradient-tracking inputs."""

    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape inside the block."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor._wrap(as_tensor(x).data, False)


def _make(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape.record(_Node(out, inputs, vjp, op))
    return out


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def _operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _operands("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _operands("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _operands("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "div")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant Python scalar (no gradient wrt ``c``)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row of the product."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape)

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ w.data + b.data, (x, w, b), vjp, "linear")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    y = np.logaddexp(0.0, x)
    return y, lambda g: g * _sigmoid(x)


def _silu(x):
    s = _sigmoid(x)
    return x * s, lambda g: g * (s * (1.0 + x * (1.0 - s)))


def _tanh(x):
    y = np.tanh(x)
    return y, lambda g: g * (1.0 - y * y)


# softplus(x) = ln(1 + e^x); silu(x) = x * sigmoid(x); tanh.  All C-infinity.
NONLINEARITIES: dict[str, Callable] = {
    "softplus": _softplus,
    "silu": _silu,
    "tanh": _tanh,
}


def nonlinearity(kind: str, x) -> Tensor:
    try:
        fn = NONLINEARITIES[kind]
    except KeyError:
        raise ValueError(
            f"unknown nonlinearity {kind!r}; expected one of {sorted(NONLINEARITIES)}"
        ) from None
    x = as_tensor(x)
    y, grad_fn = fn(x.data)
    return _make(y, (x,), lambda g: (grad_fn(g),), kind)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of empty sequence")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def repeat_rows(v, n: int) -> Tensor:
    """Tile a vector of length k into an ``[n, k]`` matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError("repeat_rows", v.shape)
    return _make(
        np.tile(v.data, (int(n), 1)), (v,), lambda g: (g.sum(axis=0),), "repeat_rows"
    )


def normalize_rows(x, eps: float = 0.0) -> Tensor:
    """Scale each row of a matrix (or a single vector) to unit L2 norm."""
    x = as_tensor(x)
    if x.ndim not in (1, 2):
        raise ShapeError("normalize_rows", x.shape)
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True)) + eps
    if np.any(norms == 0):
        raise ValueError("normalize_rows: zero-norm row")
    y = x.data / norms

    def vjp(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), vjp, "normalize_rows")


def _scalar(g) -> float:
    """Upstream gradient of a scalar op, which may arrive as shape () or (1,)."""
    return float(np.asarray(g).reshape(-1)[0])


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(
        np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, _scalar(g)),), "sum"
    )


def tensor_mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.sum() / n),
        (x,),
        lambda g: (np.full(shape, _scalar(g) / n),),
        "mean",
    )


def sq_l2_norm(x) -> Tensor:
    """Sum of squares of all entries."""
    x = as_tensor(x)
    return _make(
        np.asarray(np.sum(x.data * x.data)),
        (x,),
        lambda g: (2.0 * _scalar(g) * x.data,),
        "sq_l2_norm",
    )


class DegenerateDirectionError(ValueError):
    """Cosine similarity requested against a zero-norm vector."""


def _nonzero_norm(v: np.ndarray, name: str) -> np.ndarray:
    n = np.sqrt(np.sum(v * v, axis=-1))
    if np.any(n == 0):
        raise DegenerateDirectionError(f"cosine_similarity: {name} has zero norm")
    return n


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = _nonzero_norm(a.data, "a")
    nb = _nonzero_norm(b.data, "b")
    c = float(a.data @ b.data) / (na * nb)
    c = min(1.0, max(-1.0, c))

    def vjp(g):
        g = _scalar(g)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga, gb

    return _make(np.asarray(c), (a, b), vjp, "cosine_similarity")


def cosine_similarity_rows(a, b) -> Tensor:
    """Cosine similarity of every row of ``a`` [n, k] with the vector ``b`` [k]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError("cosine_similarity_rows", a.shape, b.shape)
    na = _nonzero_norm(a.data, "a")
    nb = float(_nonzero_norm(b.data, "b"))
    c = np.clip((a.data @ b.data) / (na * nb), -1.0, 1.0)

    def vjp(g):
        ga = g[:, None] * (b.data[None, :] / (na[:, None] * nb) - c[:, None] * a.data / (na[:, None] ** 2))
        gb = (g[:, None] * (a.data / (na[:, None] * nb) - c[:, None] * b.data[None, :] / nb**2)).sum(axis=0)
        return ga, gb

    return _make(c, (a, b), vjp, "cosine_similarity_rows")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-tracking ancestor of ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The thread's tape is
    cleared afterwards, so each recorded graph can be differentiated once.
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    tape = get_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tracked: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        tracked[id(node.out)] = node.out
        _accumulate(node.out, g)
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            tracked[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
    # leaves (never produced by a recorded node)
    for key, g in grads.items():
        _accumulate(tracked[key], g)
    tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Returns fresh parameter arrays and a fresh state; inputs are not modified.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("adamw_step", p.shape, g.shape, m.shape)
        p = p * (1.0 - lr * weight_decay)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(step, new_m, new_v)
