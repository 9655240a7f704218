"""A small define-by-run tensor engine with reverse-mode differentiation.

Only the operations the detector needs are provided. Every op records a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the tape in reverse topological order and frees it afterwards.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

_GELU_S2PI = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715

_STATE = {"dtype": np.float32, "grad": True, "debug": False}


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an op's contract."""


class UsageError(RuntimeError):
    """Raised on misuse of the autodiff API."""


def get_default_dtype():
    return _STATE["dtype"]


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the floating dtype of newly created tensors."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextmanager
def no_grad():
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


@contextmanager
def debug_mode(enabled=True):
    """Check every op output for NaN/Inf and reject log of non-positive input."""
    prev = _STATE["debug"]
    _STATE["debug"] = enabled
    try:
        yield
    finally:
        _STATE["debug"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        dt = _STATE["dtype"]
        if isinstance(data, np.ndarray) and data.dtype == dt:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._leaf = _backward is None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    if _STATE["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- autodiff


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 and grad is None:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    if not loss._leaf and loss._backward is None:
        raise UsageError("graph already freed by a previous backward call")
    if grad is None:
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def pow(a, p):
    """Elementwise power with a constant real exponent."""
    a = as_tensor(a)
    x = a.data
    out = x ** p
    return _result(out, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    if _STATE["debug"] and np.any(x <= 0):
        raise FloatingPointError("log of non-positive input")
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    x = a.data
    m = x > 0
    return _result(x * m, (a,), lambda g: (g * m,))


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    float32 goes through a compiled kernel whose tanh is a rational
    approximation accurate to a few float32 ulp; other dtypes use numpy.
    """
    x = np.ascontiguousarray(a.data)
    if x.dtype == np.float32:
        xf = x.reshape(-1)
        out = np.empty_like(xf)
        _kernels.gelu_forward_f32(xf, out)
        out = out.reshape(x.shape)
    else:
        th = np.tanh(_GELU_S2PI * (x + _GELU_C * x ** 3))
        out = 0.5 * x * (1.0 + th)

    def bw(g):
        if x.dtype == np.float32:
            gx = np.empty_like(xf)
            _kernels.gelu_backward_f32(xf, np.ascontiguousarray(g, dtype=np.float32).reshape(-1), gx)
            return (gx.reshape(x.shape),)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_S2PI * (1.0 + 3 * _GELU_C * x * x)
        return (g * d,)

    return _result(out, (a,), bw)


def clamp(a, lo=None, hi=None):
    x = a.data
    out = np.clip(x, lo, hi)
    m = np.ones(x.shape, dtype=bool)
    if lo is not None:
        m &= x >= lo
    if hi is not None:
        m &= x <= hi
    return _result(out, (a,), lambda g: (g * m,))


def absolute(a):
    x = a.data
    s = np.sign(x)
    return _result(np.abs(x), (a,), lambda g: (g * s,))


# ---------------------------------------------------------------- reductions & shape


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, idx):
    """Basic or advanced indexing; the gradient scatters back with add.at."""
    shape = a.shape
    out = a.data[idx]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), bw)


def matmul(a, b):
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        if gb is not None and gb.ndim > bd.ndim:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """y = x @ w + b over the last axis of ``x``.

    The forward accumulates over input features one at a time so every row
    is computed by the same sequence of float ops regardless of its position.
    ``w`` has shape (in, out).
    """
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input features {xd.shape[-1]} != weight rows {wd.shape[0]}")
    out = np.zeros(xd.shape[:-1] + (wd.shape[1],), dtype=xd.dtype)
    for k in range(wd.shape[0]):
        out += xd[..., k:k + 1] * wd[k]
    parents = (x, w)
    if b is not None:
        out += b.data
        parents = (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gh = g * gamma.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out, (x, gamma, beta), bw)


def layer_norm_cf(x, gamma, beta, eps=1e-6):
    """Channels-first layer norm: per (n, h, w) position, normalise over C."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm_cf: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    N, C, H, W = x.shape
    xd = np.ascontiguousarray(x.data).reshape(N, C, H * W)
    y = np.empty_like(xd)
    xhat = np.empty_like(xd)
    rstd = np.empty((N, H * W), dtype=xd.dtype)
    _kernels.layer_norm_cf_forward(xd, gamma.data, beta.data, eps, y, xhat, rstd)

    def bw(g):
        g = np.ascontiguousarray(g).reshape(N, C, H * W)
        dx = np.empty_like(g)
        dgamma = np.empty(C, dtype=g.dtype)
        dbeta = np.empty(C, dtype=g.dtype)
        _kernels.layer_norm_cf_backward(g, xhat, rstd, gamma.data, dx, dgamma, dbeta)
        return dx.reshape(N, C, H, W), dgamma, dbeta

    return _result(y.reshape(N, C, H, W), (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolution


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation on NCHW input with OIHW weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if C % groups or Co % groups:
        raise ShapeError(f"conv2d: channels in={C} out={Co} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight expects {Cg} channels per group, input gives {C // groups}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({Co},)")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}")
    if groups == 1 and kh == kw == 1 and stride == 1 and padding == 0:
        out, bw = _conv_pointwise(x.data, w.data)
    elif groups == C and Cg == 1 and Co == C and stride == 1 and kh == kw and 2 * padding == kh - 1:
        out, bw = _conv_depthwise(x.data, w.data, padding)
    elif groups == 1 and kh == kw == stride and padding == 0 and H % kh == 0 and W % kw == 0:
        out, bw = _conv_patchify(x.data, w.data)
    else:
        out, bw = _conv_im2col(x.data, w.data, stride, padding, groups, Ho, Wo)
    parents = (x, w)
    if b is not None:
        out += b.data.reshape(1, Co, 1, 1)
        parents = (x, w, b)

    def backward_fn(g):
        gx, gw = bw(g, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, backward_fn)


def _conv_pointwise(xd, wd):
    N, C, H, W = xd.shape
    Co = wd.shape[0]
    w2 = wd.reshape(Co, C)
    x3 = xd.reshape(N, C, H * W)
    out = np.matmul(w2, x3).reshape(N, Co, H, W)

    def bw(g, need_x, need_w):
        g3 = g.reshape(N, Co, H * W)
        gx = np.matmul(w2.T, g3).reshape(N, C, H, W) if need_x else None
        gw = None
        if need_w:
            gw = g3[0] @ x3[0].T
            for n in range(1, N):
                gw = gw + g3[n] @ x3[n].T
            gw = gw.reshape(Co, C, 1, 1)
        return gx, gw

    return out, bw


def _conv_patchify(xd, wd):
    """Non-overlapping k x k patches (kernel == stride) as one matmul."""
    N, C, H, W = xd.shape
    Co, _, k, _ = wd.shape
    Ho, Wo = H // k, W // k
    cols = xd.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * k * k, Ho * Wo)
    w2 = wd.reshape(Co, C * k * k)
    out = np.matmul(w2, cols).reshape(N, Co, Ho, Wo)

    def bw(g, need_x, need_w):
        g3 = g.reshape(N, Co, Ho * Wo)
        gx = gw = None
        if need_x:
            gc = np.matmul(w2.T, g3).reshape(N, C, k, k, Ho, Wo)
            gx = gc.transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H, W)
        if need_w:
            gw = g3[0] @ cols[0].T
            for n in range(1, N):
                gw = gw + g3[n] @ cols[n].T
            gw = gw.reshape(wd.shape)
        return gx, gw

    return out, bw


def _conv_depthwise(xd, wd, padding):
    N, C, H, W = xd.shape
    k = wd.shape[2]
    p = padding
    xp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=xd.dtype)
    xp[:, :, p:p + H, p:p + W] = xd
    w3 = np.ascontiguousarray(wd.reshape(C, k, k))
    out = np.empty((N, C, H, W), dtype=xd.dtype)
    _kernels.dwconv_forward(xp, w3, out)

    def bw(g, need_x, need_w):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if need_x:
            dxp = np.zeros_like(xp)
            _kernels.dwconv_backward_input(g, w3, dxp)
            gx = dxp[:, :, p:p + H, p:p + W].copy()
        if need_w:
            dw = np.zeros_like(w3)
            _kernels.dwconv_backward_weight(g, xp, dw)
            gw = dw.reshape(C, 1, k, k)
        return gx, gw

    return out, bw


def _conv_im2col(xd, wd, stride, padding, groups, Ho, Wo):
    N, C, H, W = xd.shape
    Co, Cg, kh, kw = wd.shape
    Cog = Co // groups
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    out = np.empty((N, Co, Ho, Wo), dtype=xd.dtype)
    for gi in range(groups):
        cg = cols[:, gi * Cg:(gi + 1) * Cg]
        wg = wd[gi * Cog:(gi + 1) * Cog]
        out[:, gi * Cog:(gi + 1) * Cog] = np.tensordot(cg, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g, need_x, need_w):
        gx = gw = None
        if need_w:
            gw = np.empty_like(wd)
        if need_x:
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for gi in range(groups):
            gg = g[:, gi * Cog:(gi + 1) * Cog]
            cs = slice(gi * Cg, (gi + 1) * Cg)
            if need_w:
                gw[gi * Cog:(gi + 1) * Cog] = np.tensordot(gg, cols[:, cs], axes=([0, 2, 3], [0, 2, 3]))
            if need_x:
                dcols = np.tensordot(gg, wd[gi * Cog:(gi + 1) * Cog], axes=([1], [0]))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, cs, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if need_x:
            gx = dxp[:, :, p:p + H, p:p + W].copy() if p else dxp
        return gx, gw

    return out, bw


def upsample_nearest(x, factor):
    if factor == 1:
        return x
    xd = x.data
    N, C, H, W = xd.shape
    out = np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),))


def avg_pool(x, factor):
    if factor == 1:
        return x
    xd = x.data
    N, C, H, W = xd.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {factor}")
    out = xd.reshape(N, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def bw(g):
        return (np.repeat(np.repeat(g * scale, factor, axis=2), factor, axis=3),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- pillar ops


def pool_points(features, mask):
    """Concatenate max and mean over the valid points of each pillar.

    ``features`` is (P, Nmax, D) and ``mask`` a (P, Nmax) boolean/0-1 array.
    The mean adds sorted values left to right so any permutation of the point
    slots gives a bit-identical result.
    """
    fd = features.data
    m = np.asarray(mask).astype(bool)
    if fd.ndim != 3 or m.shape != fd.shape[:2]:
        raise ShapeError(f"pool_points: features {fd.shape} vs mask {m.shape}")
    counts = m.sum(axis=1)
    if fd.shape[0] and counts.min() < 1:
        raise ValueError("pool_points: every pillar needs at least one valid point")
    P, Nmax, D = fd.shape
    masked = np.where(m[:, :, None], fd, -np.inf)
    arg = masked.argmax(axis=1)  # first maximal slot
    mx = np.take_along_axis(fd, arg[:, None, :], axis=1)[:, 0, :]
    zeroed = np.sort(np.where(m[:, :, None], fd, 0), axis=1)
    acc = np.zeros((P, D), dtype=fd.dtype)
    for s in range(Nmax):
        acc += zeroed[:, s, :]
    cnt = counts.astype(fd.dtype)[:, None]
    avg = acc / cnt if P else acc
    out = np.concatenate([mx, avg], axis=1)

    def bw(g):
        gm, ga = g[:, :D], g[:, D:]
        full = (ga / cnt)[:, None, :] * m[:, :, None]
        full = full.astype(g.dtype)
        np.put_along_axis(full, arg[:, None, :],
                          np.take_along_axis(full, arg[:, None, :], axis=1) + gm[:, None, :], axis=1)
        return (full,)

    return _result(out, (features,), bw)


def unmask(rows, mask):
    """Place (M, D) rows at the True slots of a (P, Nmax) mask; other slots are zero."""
    m = np.asarray(mask).astype(bool)
    rd = rows.data
    if rd.ndim != 2 or rd.shape[0] != int(m.sum()):
        raise ShapeError(f"unmask: {rd.shape[0]} rows for {int(m.sum())} valid slots")
    out = np.zeros(m.shape + (rd.shape[1],), dtype=rd.dtype)
    out[m] = rd
    return _result(out, (rows,), lambda g: (g[m],))


def scatter_pillars(pillar_features, batch_idx, rows, cols, batch_size, height, width):
    """Write per-pillar vectors (P, C) into a zero (N, C, H, W) canvas."""
    pf = pillar_features.data
    C = pf.shape[1]
    out = np.zeros((batch_size, C, height, width), dtype=pf.dtype)
    b, r, c = np.asarray(batch_idx), np.asarray(rows), np.asarray(cols)
    if len(b):
        out[b, :, r, c] = pf

    def bw(g):
        return (g[b, :, r, c],)

    return _result(out, (pillar_features,), bw)
