"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`trace` orders
the graph reachable from a scalar loss into a :class:`ComputationRecord` and
:func:`backward` replays it in reverse, accumulating ``.grad`` on leaves.

Also here: :class:`AdamState` / :func:`adam_step`, :func:`clip_grad_norm` and a
central finite-difference helper used by the gradient tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-6

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
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
        return negate(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; the gradient flows where x >= floor."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data ** exponent, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


# ---------------------------------------------------------------------------
# unary
# ---------------------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    y = np.where(neg, alpha * em1, x.data)
    return _make(y, (x,), lambda g: (g * np.where(neg, alpha * (em1 + 1.0), 1.0),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt requires strictly positive input")
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def negate(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


UNARY_OPS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elu": elu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "negate": negate,
}


def unary(op_code: str, x: Tensor) -> Tensor:
    try:
        fn = UNARY_OPS[op_code]
    except KeyError:
        raise ValueError(f"unknown unary op {op_code!r}; expected one of {sorted(UNARY_OPS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` (entity embeddings); repeated rows accumulate."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------------------
# linear algebra and fused layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting any leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def causal_mask(n: int) -> np.ndarray:
    """Boolean mask that is True strictly above the diagonal (future positions)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is True get a large negative score."""
    x = as_tensor(x)
    if x.size == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data.copy() if mask is None else np.where(mask, MASK_VALUE, x.data)
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    y = z

    def bw(g):
        # masked entries have y == 0 exactly, so their gradient vanishes without a second mask
        gx = g * y
        gx -= y * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _make(y, (x,), bw)


def softmax_masked(scores: Tensor, causal: bool) -> Tensor:
    """Row-wise softmax over the last axis of an ``[..., n, n]`` score tensor."""
    scores = as_tensor(scores)
    if scores.size == 0 or scores.ndim < 2:
        raise DimensionError(f"softmax_masked needs a non-empty [..., n, n] tensor, got {scores.shape}")
    mask = causal_mask(scores.shape[-1]) if causal else None
    if mask is not None and scores.shape[-2] != scores.shape[-1]:
        raise DimensionError(f"causal mask needs square scores, got {scores.shape}")
    return softmax(scores, axis=-1, mask=mask)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) std, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation) or rate is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor,
         h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
    """Full-sequence LSTM with hand-written backpropagation through time.

    ``x`` is ``[batch, steps, d_in]``; ``w_x`` ``[d_in, 4H]``, ``w_h`` ``[H, 4H]``,
    ``b`` ``[4H]`` with gate blocks ordered input, forget, cell, output.
    Returns the hidden state at every step, ``[batch, steps, H]``.
    """
    x, w_x, w_h, b = as_tensor(x), as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    if x.ndim != 3 or w_x.shape[0] != x.shape[-1]:
        raise DimensionError(f"lstm input {x.shape} does not match input weights {w_x.shape}")
    hidden = w_h.shape[0]
    if w_h.shape != (hidden, 4 * hidden) or w_x.shape[1] != 4 * hidden or b.shape != (4 * hidden,):
        raise DimensionError(f"inconsistent lstm weights {w_x.shape}, {w_h.shape}, {b.shape}")
    batch, steps, _ = x.shape
    h0 = Tensor(np.zeros((batch, hidden))) if h0 is None else as_tensor(h0)
    c0 = Tensor(np.zeros((batch, hidden))) if c0 is None else as_tensor(c0)

    xw = x.data @ w_x.data + b.data
    hs = np.empty((batch, steps + 1, hidden))
    cs = np.empty((batch, steps + 1, hidden))
    gates = np.empty((batch, steps, 4 * hidden))
    tanh_c = np.empty((batch, steps, hidden))
    hs[:, 0], cs[:, 0] = h0.data, c0.data
    H = hidden
    for t in range(steps):
        z = xw[:, t] + hs[:, t] @ w_h.data
        ifo = _sigmoid(np.concatenate([z[:, :2 * H], z[:, 3 * H:]], axis=1))
        i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        g = np.tanh(z[:, 2 * H:3 * H])
        cs[:, t + 1] = f * cs[:, t] + i * g
        tanh_c[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tanh_c[:, t]
        gates[:, t, :H], gates[:, t, H:2 * H] = i, f
        gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = g, o

    def bw(grad_out):
        dz = np.empty((batch, steps, 4 * H))
        dh = np.zeros((batch, H))
        dc = np.zeros((batch, H))
        for t in range(steps - 1, -1, -1):
            dh = dh + grad_out[:, t]
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = tanh_c[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz[:, t, :H] = dc * g * i * (1.0 - i)
            dz[:, t, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, t, 3 * H:] = dh * tc * o * (1.0 - o)
            dh = dz[:, t] @ w_h.data.T
            dc = dc * f
        flat_dz = dz.reshape(-1, 4 * H)
        gx = (dz @ w_x.data.T) if x.requires_grad else None
        gwx = x.data.reshape(-1, x.shape[-1]).T @ flat_dz if w_x.requires_grad else None
        gwh = hs[:, :-1].reshape(-1, H).T @ flat_dz if w_h.requires_grad else None
        gb = flat_dz.sum(axis=0) if b.requires_grad else None
        return gx, gwx, gwh, gb, dh, dc

    return _make(hs[:, 1:].copy(), (x, w_x, w_h, b, h0, c0), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

@dataclass
class ComputationRecord:
    """Graph nodes in execution (topological) order: parents precede consumers."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]


def trace(loss: Tensor) -> ComputationRecord:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return ComputationRecord(order)


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = trace(loss) if record is None else record
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the factor."""
    with_grad = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in with_grad))
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for p in with_grad:
        p.grad = p.grad * factor
    return factor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, **kw) -> AdamState:
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One bias-corrected Adam update in place; parameters without a gradient are skipped."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale)
