"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine records a DAG of operations as results are computed; calling
``gradients(loss, named)`` (or ``Tensor.backward()``) replays the graph in
reverse topological order and accumulates vector-Jacobian products.  Only the
operations the sequence model actually needs are provided.  Everything is
64-bit; any op that produces a NaN/Inf raises ``NonFiniteError`` immediately
instead of letting it propagate.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

MASK_NEG = -1e30  # additive mask sentinel: exp() underflows to exactly 0.0


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """The recorded graph is malformed (cycle, non-scalar loss, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``_parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the gradient
    at this node to the gradient contribution for that parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    # keep numpy from intercepting `ndarray <op> Tensor`; reflected
    # operators below handle those
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: list = []

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Accumulate gradients of this scalar into ``.grad`` of every
        gradient-requiring tensor reachable from it."""
        for node, g in _backward_pass(self).items():
            if node.grad is None:
                node.grad = g
            else:
                node.grad = node.grad + g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents) -> Tensor:
    """Build an op result, recording parents when grad mode is on."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor(data)
    if _grad_enabled:
        tracked = [(p, vjp) for p, vjp in parents if p.requires_grad]
        if tracked:
            out.requires_grad = True
            out._parents = tracked
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- graph traversal -----------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Iterative DFS topological order with cycle detection."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0/absent new, 1 on stack, 2 done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, phase = stack.pop()
        if phase == 0:
            st = state.get(id(node), 0)
            if st == 1:
                raise GraphError("cycle detected in computation graph")
            if st == 2:
                continue
            state[id(node)] = 1
            stack.append((node, 1))
            for parent, _ in node._parents:
                if state.get(id(parent), 0) == 0:
                    stack.append((parent, 0))
                elif state.get(id(parent)) == 1:
                    raise GraphError("cycle detected in computation graph")
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def _backward_pass(loss: Tensor) -> dict:
    """Return {tensor: gradient array} for every tensor touched by the loss.

    Keyed by identity; only gradient-requiring nodes appear.
    """
    if loss.size != 1:
        raise GraphError("backward requires a scalar loss")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is not finite")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        out[node] = g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return out


def gradients(loss: Tensor, named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for a named set of leaf tensors.

    Leaves that the loss never touched get zero gradients of matching shape.
    Does not mutate ``.grad``.
    """
    table = _backward_pass(loss)
    return {
        name: table.get(t, np.zeros_like(t.data)) if t.requires_grad
        else np.zeros_like(t.data)
        for name, t in named.items()
    }


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(over="ignore"):
        out = a.data * b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, [(a, lambda g: -g)])


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data ** p
    return _make(out, [(a, lambda g: g * p * a.data ** (p - 1.0))])


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _make(out, [(a, ga), (b, gb)])


# -- shape ops ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    axes_ = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes_)
    return _make(a.data.transpose(axes_), [(a, lambda g: g.transpose(inv))])


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _make(np.swapaxes(a.data, ax1, ax2),
                 [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 [(p, make_vjp(i)) for i, p in enumerate(parts)])


def getitem(a, key) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return out

    return _make(a.data[key], [(a, vjp)])


def gather(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis``: pick entries of ``a`` by an integer index array."""
    a = _wrap(a)
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(a.data)
        grids = list(np.indices(index.shape))
        grids[axis] = index
        np.add.at(out, tuple(grids), g)
        return out

    return _make(np.take_along_axis(a.data, index, axis=axis), [(a, vjp)])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy() / n

    return _make(a.data.mean(axis=axis, keepdims=keepdims), [(a, vjp)])


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * 0.5 / out)])


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), [(a, lambda g: g * keep)])


def softplus(a, beta: float = 1.0) -> Tensor:
    """(1/beta) * log(1 + exp(beta*x)), computed stably."""
    a = _wrap(a)
    if beta <= 0:
        raise ValueError("softplus beta must be positive")
    z = beta * a.data
    out = np.logaddexp(0.0, z) / beta
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return _make(out, [(a, lambda g: g * sig)])


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = _wrap(a)
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), [(a, lambda g: g * keep)])


# -- structured ops --------------------------------------------------------


def row_softmax(a, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, after adding an optional constant mask.

    Mask entries at ``MASK_NEG`` underflow to exactly 0 probability.
    """
    a = _wrap(a)
    z = a.data if additive_mask is None else a.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _make(out, [(a, vjp)])


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization over the last axis with learned scale/shift."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def ga(g):
        gg = g * gain.data
        return (gg - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) * inv

    def ggain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def gbias(g):
        return _unbroadcast(g, bias.shape)

    return _make(out, [(a, ga), (gain, ggain), (bias, gbias)])


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Row lookup: ``table[ids]`` with scatter-add gradients into the table."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"embedding id out of range [0, {table.shape[0] - 1}]")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return out

    return _make(table.data[ids], [(table, vjp)])


def conv1d_feature(a, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Single-channel 1-D convolution along the last (feature) axis.

    Output length is floor((L + 2*padding - k) / stride) + 1; each leading
    index (batch, position, ...) is convolved independently.
    """
    a, kernel = _wrap(a), _wrap(kernel)
    k = kernel.shape[0]
    x = a.data
    if padding:
        pad = [(0, 0)] * (x.ndim - 1) + [(padding, padding)]
        x = np.pad(x, pad)
    lpad = x.shape[-1]
    if lpad < k:
        raise ValueError("conv1d_feature: kernel longer than padded input")
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)[..., ::stride, :]
    out = windows @ kernel.data

    def ga(g):
        gx = np.zeros_like(x)
        for j in range(k):
            stop = j + stride * g.shape[-1]
            gx[..., j:stop:stride] += kernel.data[j] * g
        if padding:
            gx = gx[..., padding:lpad - padding]
        return gx

    def gk(g):
        return windows.reshape(-1, k).T @ g.reshape(-1)

    return _make(out, [(a, ga), (kernel, gk)])


def maxpool1d_feature(a, size: int, stride: int) -> Tensor:
    """Max pooling along the last axis; ties route gradient to the first max."""
    a = _wrap(a)
    windows = np.lib.stride_tricks.sliding_window_view(a.data, size, axis=-1)[..., ::stride, :]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(a.data)
        flat_g = g.reshape(-1, g.shape[-1])
        flat_arg = arg.reshape(-1, arg.shape[-1])
        rows = np.repeat(np.arange(flat_g.shape[0]), flat_g.shape[1])
        offs = np.arange(g.shape[-1]) * stride
        cols = (offs[None, :] + flat_arg).reshape(-1)
        np.add.at(gx.reshape(-1, a.shape[-1]), (rows, cols), flat_g.reshape(-1))
        return gx

    return _make(out, [(a, vjp)])


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; exact identity (same tensor) when not training."""
    a = _wrap(a)
    if not train or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * mask, [(a, lambda g: g * mask)])


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients against central finite differences.

    ``max_rel_err`` covers components with |analytic| >= abs_floor, using
    |a - fd| / max(|a|, |fd|); smaller components are held to the absolute
    bound ``max_small_abs_err <= abs_floor``.
    """

    max_rel_err: float = 0.0
    max_small_abs_err: float = 0.0
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)
    abs_floor: float = 1e-7

    def ok(self, rel_tol: float = 1e-4) -> bool:
        return (self.max_rel_err < rel_tol
                and self.max_small_abs_err < self.abs_floor)

    def summary(self) -> str:
        return (f"max_rel_err={self.max_rel_err:.3e} "
                f"max_small_abs_err={self.max_small_abs_err:.3e} "
                f"worst={self.worst_param or '-'}")


def finite_difference_gradient(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. one tensor."""
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(tensor.shape)


def gradient_check(build_loss, named: dict[str, Tensor],
                   h: float = 1e-5, abs_floor: float = 1e-7) -> GradCheckReport:
    """Check analytic gradients of ``build_loss()`` for every named tensor.

    ``build_loss`` must be a pure function of the current tensor values and
    return a scalar Tensor.
    """
    analytic = gradients(build_loss(), named)

    def scalar():
        return build_loss().item()

    report = GradCheckReport(abs_floor=abs_floor)
    for name, t in named.items():
        fd = finite_difference_gradient(scalar, t, h=h)
        a = analytic[name]
        diff = np.abs(a - fd)
        small = np.abs(a) < abs_floor
        rel = np.zeros_like(diff)
        big = ~small
        if np.any(big):
            rel[big] = diff[big] / np.maximum(np.abs(a[big]), np.abs(fd[big]))
        p_rel = float(rel.max()) if np.any(big) else 0.0
        p_abs = float(diff[small].max()) if np.any(small) else 0.0
        report.per_param[name] = {"max_rel_err": p_rel, "max_small_abs_err": p_abs}
        if p_rel > report.max_rel_err:
            report.max_rel_err = p_rel
            report.worst_param = name
        report.max_small_abs_err = max(report.max_small_abs_err, p_abs)
    return report
