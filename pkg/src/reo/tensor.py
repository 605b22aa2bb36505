"""Reverse-mode autodiff on top of numpy.

Every primitive builds its output through ``_node`` which records the parents
and a closure mapping the output gradient to one gradient per parent.
Storage is float32 by default; ``precision(np.float64)`` switches every op to
64-bit, which is what the finite-difference checker uses.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_state = {"dtype": np.float32, "grad": True, "check_finite": True}


class NumericError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    """Input data is malformed or out of range."""


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operators
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    """Wrap a forward result; ``backward_fn(g)`` returns one grad per parent."""
    dtype = _state["dtype"]
    data = np.asarray(data, dtype=dtype)
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _state["grad"] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


@dataclass
class Graph:
    """Topologically ordered view of the nodes that feed a scalar."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if not n._parents]


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "div")


def power(a, p):
    a = as_tensor(a)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a):
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    # tanh approximation
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C + (_GELU_C * 3 * 0.044715) * x2
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw, "gelu")


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axes, keepdims) * (1.0 / n)


def max_(a, axis, keepdims=False):
    """Max along one axis; ties split the gradient evenly."""
    out = a.data.max(axis=axis, keepdims=True)

    def bw(g):
        mask = a.data == out
        mask = mask / mask.sum(axis=axis, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * mask,)

    res = out if keepdims else np.squeeze(out, axis)
    return _node(res, (a,), bw, "max")


# -------------------------------------------------------------- shape & index

def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "getitem")


def take_rows(a, rows):
    """Gather along axis 0 with an integer index array."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return _node(a.data[rows], (a,), bw, "take_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.squeeze(x, axis) for x in np.split(g, n, axis=axis)), "stack")


def pad2d(a, pad):
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[..., pad:-pad, pad:-pad],), "pad2d")


# --------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """y = x @ W + b over the last axis of x."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
    xs = x.shape

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, xs[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0, dtype=np.float64)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "linear")


# ---------------------------------------------------------- softmax & friends

def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def logsumexp(a, axis=-1, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True, dtype=np.float64)
    out = m + np.log(s)
    p = np.exp(a.data - out)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), bw, "logsumexp")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    # rows are short, so accumulating in the storage dtype is accurate enough
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / xc.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gh = g * gamma.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return (gx, (g2 * xhat.reshape(-1, n)).sum(axis=0, dtype=np.float64),
                g2.sum(axis=0, dtype=np.float64))

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# ------------------------------------------------------------------ attention

_ATTN_CHUNK = 1 << 16  # score elements per block


def _attention_block(qb, kt, blk):
    """Softmax(qb @ kt) row-wise, written into ``blk``."""
    # One shift for the whole block is much cheaper than per-row maxima.
    # Rows sitting far below the block max would lose precision, so they
    # are recomputed with their own maximum.
    np.matmul(qb, kt, out=blk)
    blk -= blk.max()
    np.exp(blk, out=blk)
    tot = blk.sum(axis=-1, keepdims=True)
    bad = np.flatnonzero(tot[:, 0] < 1e-20)
    if bad.size:
        r = qb[bad] @ kt
        r -= r.max(axis=-1, keepdims=True)
        np.exp(r, out=r)
        blk[bad] = r
        tot[bad] = r.sum(axis=-1, keepdims=True)
    blk /= tot

def cross_attention(q, k, v, heads, w_out=None, b_out=None, return_weights=False):
    """Multi-head scaled dot-product attention on already-projected rows.

    q: (Nq, C), k and v: (Nk, C). Heads split C evenly. When ``w_out`` is
    given the concatenated heads go through ``linear(., w_out, b_out)``.
    """
    nq, c = q.shape
    nk = k.shape[0]
    if c % heads:
        raise ConfigError(f"width {c} not divisible by heads={heads}")
    if k.shape[1] != c or v.shape != k.shape:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    dh = c // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2) * np.float32(scale)
    kh = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    p = np.empty((heads, nq, nk), dtype=np.result_type(q.data, k.data))
    o = np.empty((heads, nq, dh), dtype=np.result_type(p, v.data))
    # per head and in row chunks so the score block stays cache resident
    step = max(1, _ATTN_CHUNK // max(nk, 1))
    for h in range(heads):
        kt = kh[h].T
        for i in range(0, nq, step):
            blk = p[h, i:i + step]
            _attention_block(qh[h, i:i + step], kt, blk)
            np.matmul(blk, vh[h], out=o[h, i:i + step])
    o = o.transpose(1, 0, 2).reshape(nq, c)

    def bw(g):
        gh = g.reshape(nq, heads, dh).transpose(1, 0, 2)
        gq = np.empty((heads, nq, dh), dtype=p.dtype)
        gk = np.empty((heads, nk, dh), dtype=p.dtype)
        gv = np.empty((heads, nk, dh), dtype=p.dtype)
        for h in range(heads):
            ph = p[h]
            gv[h] = ph.T @ gh[h]
            gs = gh[h] @ vh[h].T
            gs -= (gs * ph).sum(axis=-1, keepdims=True)
            gs *= ph
            gq[h] = gs @ kh[h] * scale
            gk[h] = gs.T @ qh[h]

        def back(x, n):
            return x.transpose(1, 0, 2).reshape(n, c)

        return back(gq, nq), back(gk, nk), back(gv, nk)

    out = _node(o, (q, k, v), bw, "attention")
    weights = Tensor(p) if return_weights else None
    if w_out is not None:
        out = linear(out, w_out, b_out)
    return (out, weights) if return_weights else out


# --------------------------------------------------------------- convolution

def _conv_out(n, k, stride, dilation, pad):
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, dilation=1, pad=None):
    """Cross-correlation of (C,H,W) or (B,C,H,W) input with a (Co,C,k,k) kernel.

    ``pad=None`` means shape-preserving padding dilation*(k-1)/2.
    """
    if stride <= 0 or dilation <= 0:
        raise ConfigError(f"stride and dilation must be positive, got {stride}, {dilation}")
    co, ci, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square and odd, got {kh}x{kw}")
    k = kh
    if pad is None:
        pad = dilation * (k - 1) // 2
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    b, c, h, w = xd.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    ho, wo = _conv_out(h, k, stride, dilation, pad), _conv_out(w, k, stride, dilation, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((b, c, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i * dilation: i * dilation + stride * (ho - 1) + 1: stride,
                                  j * dilation: j * dilation + stride * (wo - 1) + 1: stride]
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gk = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(kernel.data, gb, axes=([0], [1]))  # (C,k,k,B,Ho,Wo)
        gxp = np.zeros(xp.shape, dtype=gb.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i * dilation: i * dilation + stride * (ho - 1) + 1: stride,
                    j * dilation: j * dilation + stride * (wo - 1) + 1: stride] += \
                    gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if unbatched:
            gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, gb.sum(axis=(0, 2, 3), dtype=np.float64)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bw, "conv2d")


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample2x")


# -------------------------------------------------------- finite differences

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_excluded: int
    worst: tuple | None = None

    def passed(self, tol):
        return self.max_rel_err < tol


def finite_diff_check(f, params, eps=1e-3, tol=1e-3, n_coords=None, seed=0,
                      kink_distance=None, floor=1e-6):
    """Compare analytic grads of scalar ``f()`` against central differences.

    Runs in float64. ``params`` are leaf tensors; their data is temporarily
    upcast and restored afterwards. ``n_coords`` samples that many coordinates
    across all params (all coordinates when None). ``kink_distance(pi, j)``
    returns the distance from coordinate ``j`` of param ``pi`` to the nearest
    non-differentiable point; coordinates closer than 2*eps are excluded.
    """
    saved = [(p.data, p.grad, p.requires_grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
            p.requires_grad = True
        with precision(np.float64):
            loss = f()
            backward(loss)
            analytic = [np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64)
                        for p in params]
            coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
            if n_coords is not None and n_coords < len(coords):
                rng = np.random.default_rng(seed)
                pick = rng.choice(len(coords), size=n_coords, replace=False)
                coords = [coords[i] for i in sorted(pick)]
            worst, max_err, excluded, checked = None, 0.0, 0, 0
            with no_grad():
                for pi, j in coords:
                    if kink_distance is not None and kink_distance(pi, j) < 2 * eps:
                        excluded += 1
                        continue
                    flat = params[pi].data.reshape(-1)
                    orig = flat[j]
                    flat[j] = orig + eps
                    fp = float(f().data)
                    flat[j] = orig - eps
                    fm = float(f().data)
                    flat[j] = orig
                    num = (fp - fm) / (2 * eps)
                    ana = analytic[pi].reshape(-1)[j]
                    err = abs(ana - num) / max(abs(ana), abs(num), floor)
                    checked += 1
                    if err > max_err:
                        max_err, worst = err, (pi, j, ana, num)
    finally:
        for p, (d, g, rg) in zip(params, saved):
            p.data, p.grad, p.requires_grad = d, g, rg
    return GradCheckReport(max_err, checked, excluded, worst)
