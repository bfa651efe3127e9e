"""Dense float64 arrays with a small reverse-mode autodiff tape.

Only the operations needed by the recurrent networks, joint networks and
losses of this package are provided.  Every op checks its inputs' shapes and
refuses to produce non-finite values.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "param", "const", "no_grad",
    "grad_enabled", "forward_op", "backward", "matmul", "add", "mul", "scale",
    "tanh", "sigmoid", "embed", "log_softmax", "mean", "sum_all", "gather",
    "slice_last", "take", "stack", "reshape", "LstmParams", "lstm_cell_step", "lstm_cell_step_np",
    "init_uniform", "clip_global_norm", "sgd_update", "custom_op",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
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
    """A node on the tape: forward value, parents and a local backward rule."""

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def param(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _node(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if not track:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=inputs, backward_fn=backward_fn)


custom_op = _node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av @ bv

    def backward(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("elementwise-mul", a, b)
    av, bv = a.value, b.value
    return _node("elementwise-mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _node("scale", a.value * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _node("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.value)
    return _node("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def embed(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("embed-lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed-lookup: id out of range [0, {table.shape[0]})")
    nrows = table.shape[0]

    def backward(g):
        gt = np.zeros((nrows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _node("embed-lookup", table.value[ids], (table,), backward)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = _as_tensor(a)
    y = log_softmax_np(a.value)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node("log-softmax", y, (a,), backward)


def mean(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    if not -a.value.ndim <= axis < a.value.ndim:
        raise ShapeError("mean-over-axis", a.shape, detail=f"axis {axis}")
    n = a.shape[axis]
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _node("mean-over-axis", a.value.mean(axis=axis), (a,), backward)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _node("sum", np.asarray(a.value.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def gather(a, index) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError("gather", a.shape, index.shape)
    picked = np.take_along_axis(a.value, index[..., None], axis=-1)[..., 0]
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, index[..., None], g[..., None], axis=-1)
        return (ga,)

    return _node("gather", picked, (a,), backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("slice", a.shape, detail=f"[{start}:{stop}]")
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[..., start:stop] = g
        return (ga,)

    return _node("slice", a.value[..., start:stop], (a,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis`` (used for time subsampling)."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.add.at(ga, (slice(None),) * (axis % len(shape)) + (indices,), g)
        return (ga,)

    return _node("take", np.take(a.value, indices, axis=axis), (a,), backward)


def stack(items: Sequence[Tensor], axis: int) -> Tensor:
    items = [_as_tensor(t) for t in items]
    if not items:
        raise ShapeError("stack", detail="no inputs")
    first = items[0].shape
    for t in items[1:]:
        if t.shape != first:
            raise ShapeError("stack", first, t.shape)
    out = np.stack([t.value for t in items], axis=axis)
    n = len(items)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node("stack", out, tuple(items), backward)


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape)) from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(orig),))


_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elementwise-mul": mul,
    "embed-lookup": embed,
    "log-softmax": log_softmax,
    "mean-over-axis": mean,
    "gather": gather,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("mean-over-axis", x, axis=0)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Back-propagate a scalar loss.

    Gradients are accumulated into ``.grad`` of every tensor on the tape.  When
    ``params`` is given, a name -> gradient dict is returned; parameters the
    loss does not depend on (or frozen ones) get exact zeros.
    """
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    order = _topological_order(loss) if loss.requires_grad else []
    for node in order:
        node.grad = None
    if order:
        loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        on_tape = p.grad is not None and any(n is p for n in order)
        out[name] = p.grad.copy() if on_tape else np.zeros_like(p.value)
    return out


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

class LstmParams:
    """Weights of one LSTM layer; gate order is input, forget, cell, output."""

    def __init__(self, w_x: Tensor, w_h: Tensor, b: Tensor):
        if w_x.shape[1] != 4 * w_h.shape[0] or w_h.shape[1] != w_x.shape[1] or b.shape != (w_x.shape[1],):
            raise ShapeError("lstm", w_x.shape, w_h.shape, b.shape)
        self.w_x, self.w_h, self.b = w_x, w_h, b

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]


def lstm_cell_step(params: LstmParams, x, state: Tuple[Tensor, Tensor]):
    """One LSTM step.  Returns ``(h_new, (h_new, c_new))``."""
    x = _as_tensor(x)
    h, c = state
    n = params.hidden
    if x.shape[-1] != params.input_dim or h.shape[-1] != n or c.shape[-1] != n:
        raise ShapeError("lstm", x.shape, h.shape, c.shape,
                         detail=f"expected input {params.input_dim}, hidden {n}")
    gates = add(add(matmul(x, params.w_x), matmul(h, params.w_h)), params.b)
    i = sigmoid(slice_last(gates, 0, n))
    f = sigmoid(slice_last(gates, n, 2 * n))
    g = tanh(slice_last(gates, 2 * n, 3 * n))
    o = sigmoid(slice_last(gates, 3 * n, 4 * n))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, (h_new, c_new)


def lstm_cell_step_np(params: LstmParams, x: np.ndarray, state: Tuple[np.ndarray, np.ndarray]):
    """Inference-only ``lstm_cell_step`` on plain arrays (no tape, no checks)."""
    h, c = state
    n = params.hidden
    gates = x @ params.w_x.value + h @ params.w_h.value + params.b.value
    i = _sigmoid(gates[..., :n])
    f = _sigmoid(gates[..., n:2 * n])
    g = np.tanh(gates[..., 2 * n:3 * n])
    o = _sigmoid(gates[..., 3 * n:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, (h_new, c_new)


# ---------------------------------------------------------------------------
# Initialization and optimizer
# ---------------------------------------------------------------------------

def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], scale_: float = 0.1) -> Tensor:
    return param(rng.uniform(-scale_, scale_, size=shape))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0.0:
        return dict(grads), total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total


def sgd_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
               clip: Optional[float] = 5.0, names: Optional[Iterable[str]] = None) -> float:
    """In-place SGD step on ``names`` (default: all params).  Returns the pre-clip norm."""
    keys = list(names) if names is not None else list(grads)
    clipped, norm = clip_global_norm({k: grads[k] for k in keys}, clip)
    for k in keys:
        params[k].value = params[k].value - lr * clipped[k]
    return norm
