"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  The tape is
rebuilt on every forward pass, so data-dependent control flow (like the
recursive decode order) needs no special handling.

Gradients of intermediate nodes live only inside :func:`backward`; only
leaves that require a gradient get a persistent ``.grad`` buffer, and
repeated ``backward`` calls accumulate into it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMA_FLOOR = 1e-6

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


# --- unary ----------------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # the tanh form never overflows but saturates to exactly 0 or 1
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows and small values stay positive
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    return _result(y, "softplus", (a,), lambda g: (g / (1.0 + np.exp(-x)),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise ValueError(f"log: non-positive input (min {x.min():.3g}) for shape {a.shape}")
    return _result(np.log(x), "log", (a,), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamped."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# --- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.data.T, "transpose", (a,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last dimension."""
    ts = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ValueError(f"concat: leading shapes differ: {[t.shape for t in ts]}")
    sizes = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in ts], axis=-1)

    def backward(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(ts)))

    return _result(data, "concat", ts, backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    """a[..., start:stop]."""
    a = as_tensor(a)
    n = a.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ValueError(f"slice: range [{start}, {stop}) out of bounds for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], "slice", (a,), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ: {sorted(shapes)}")
    data = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(ts)))

    return _result(data, "stack", ts, backward)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size
    return _result(np.asarray(a.data.mean()), "mean", (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def gaussian_sample(mu, sigma, eps) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps``.

    ``eps`` is a standard-normal array supplied by the caller and receives
    no gradient.  ``sigma`` is clamped from below at ``SIGMA_FLOOR``.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if mu.shape != sigma.shape or np.broadcast_shapes(mu.shape, eps.shape) != mu.shape:
        raise ValueError(
            f"gaussian_sample: shapes mu {mu.shape}, sigma {sigma.shape}, eps {eps.shape} disagree")
    if np.any(sigma.data < 0):
        raise ValueError("gaussian_sample: negative sigma")
    live = sigma.data >= SIGMA_FLOOR
    s = np.where(live, sigma.data, SIGMA_FLOOR)
    return _result(mu.data + s * eps, "gaussian_sample", (mu, sigma),
                   lambda g: (g, g * eps * live))


# --- fused recurrent cell ------------------------------------------------

def gru_cell(h, x, w_update, w_reset, w_cand, b_update, b_reset, b_cand) -> Tensor:
    """One GRU step as a single node.

    z = sigmoid([x, h] W_z^T + b_z), r = sigmoid([x, h] W_r^T + b_r),
    n = tanh([x, r * h] W_n^T + b_n), h' = h + z * (n - h).
    Same values as composing the primitive ops, with far fewer nodes.
    """
    h, x = as_tensor(h), as_tensor(x)
    ws = (as_tensor(w_update), as_tensor(w_reset), as_tensor(w_cand))
    bs = (as_tensor(b_update), as_tensor(b_reset), as_tensor(b_cand))
    if h.data.ndim != 2 or x.data.ndim != 2 or h.shape[0] != x.shape[0]:
        raise ValueError(f"gru_cell: expected (B, H) state and (B, I) input, got {h.shape} and {x.shape}")
    H, I = h.shape[1], x.shape[1]
    for w in ws:
        if w.shape != (H, I + H):
            raise ValueError(f"gru_cell: weight shape {w.shape}, expected {(H, I + H)}")
    for b in bs:
        if b.shape != (H,):
            raise ValueError(f"gru_cell: bias shape {b.shape}, expected {(H,)}")
    hd, xd = h.data, x.data
    xh = np.concatenate([xd, hd], axis=1)
    z = _sigmoid_values(xh @ ws[0].data.T + bs[0].data)
    r = _sigmoid_values(xh @ ws[1].data.T + bs[1].data)
    xrh = np.concatenate([xd, r * hd], axis=1)
    n = np.tanh(xrh @ ws[2].data.T + bs[2].data)
    out = hd + z * (n - hd)

    def backward(g):
        an = g * z * (1.0 - n * n)
        d_xrh = an @ ws[2].data
        d_rh = d_xrh[:, I:]
        ar = d_rh * hd * r * (1.0 - r)
        az = g * (n - hd) * z * (1.0 - z)
        d_xh = az @ ws[0].data + ar @ ws[1].data
        dh = g * (1.0 - z) + d_rh * r + d_xh[:, I:]
        dx = d_xrh[:, :I] + d_xh[:, :I]
        return (dh, dx, az.T @ xh, ar.T @ xh, an.T @ xrh,
                az.sum(axis=0), ar.sum(axis=0), an.sum(axis=0))

    return _result(out, "gru_cell", (h, x, *ws, *bs), backward)


# --- graph and backward ---------------------------------------------------

class Graph:
    """Topologically ordered record of the ops that produced ``root``."""

    def __init__(self, nodes: list[Tensor], root: Tensor):
        self.nodes = nodes
        self.root = root

    @classmethod
    def build(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; graphs here are thousands of ops deep
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack_.append((p, False))
        return cls(order, root)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if graph is None:
        graph = Graph.build(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
