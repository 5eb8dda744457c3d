"""Dense NCHW tensors with a small reverse-mode tape.

Every operation used by the network is defined here as a function that
returns a new Tensor carrying a backward closure.  Gradients are checked
against central finite differences (see grad_check), so the backward
implementations are the single source of analytic truth.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "ConvSpec", "ShapeError",
    "add", "mul", "neg", "sub", "concat_channels",
    "tsum", "tmean", "tlog", "tpow", "clip",
    "relu", "sigmoid", "tanh", "activation",
    "conv2d", "conv2d_transpose", "maxpool2d",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = tuple(_prev)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def channels(self):
        return self.data.shape[1]

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (scalar unless grad given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._prev:
                visit(p)
            topo.append(t)

        visit(self)
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class ConvSpec:
    """Convolution kernel + geometry. kernel: (out_ch, in_ch, kh, kw)."""

    def __init__(self, kernel: Tensor, stride=(1, 1), padding="valid"):
        if isinstance(stride, int):
            stride = (stride, stride)
        if kernel.data.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got {kernel.data.shape}")
        kh, kw = kernel.data.shape[2:]
        if kh < 1 or kw < 1 or stride[0] < 1 or stride[1] < 1:
            raise ValueError("kernel dims and stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    @property
    def out_ch(self):
        return self.kernel.data.shape[0]

    @property
    def in_ch(self):
        return self.kernel.data.shape[1]


def _as_prev(*tensors):
    return tuple(t for t in tensors if t.requires_grad or t._backward is not None)


def _needs_grad(*tensors):
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _unbroadcast(g, shape):
    """Sum gradient g back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _prev=_as_prev(a, b))
    if out._prev:
        def _bw(g):
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
            b.accumulate_grad(_unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _prev=_as_prev(a, b))
    if out._prev:
        def _bw(g):
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(-g)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean()), _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(np.broadcast_to(g / n, a.data.shape).copy())
    return out


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(g / a.data)
    return out


def tpow(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data ** exponent, _prev=_as_prev(a))
    if out._prev:
        def _bw(g):
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))
        out._backward = _bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclipped interior."""
    out = Tensor(np.clip(a.data, lo, hi), _prev=_as_prev(a))
    if out._prev:
        mask = (a.data >= lo) & (a.data <= hi)
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), _prev=_as_prev(a))
    if out._prev:
        mask = a.data > 0
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(s, _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(g * s * (1.0 - s))
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, _prev=_as_prev(a))
    if out._prev:
        out._backward = lambda g: a.accumulate_grad(g * (1.0 - t * t))
    return out


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1),
                 _prev=_as_prev(*tensors))
    if out._prev:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def _bw(g):
            for t, gpart in zip(tensors, np.split(g, splits, axis=1)):
                t.accumulate_grad(gpart)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def _same_pad(h, w, kh, kw, sh, sw):
    # symmetric zero padding, extra pixel on bottom/right when odd
    oh = -(-h // sh)
    ow = -(-w // sw)
    ph = max((oh - 1) * sh + kh - h, 0)
    pw = max((ow - 1) * sw + kw - w, 0)
    return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)


def _im2col(xp, kh, kw, sh, sw):
    # xp already padded: (n, c, hp, wp) -> (n, oh, ow, c, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win[:, :, ::sh, ::sw].transpose(0, 2, 3, 1, 4, 5))


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    k = spec.kernel
    cout, cin, kh, kw = k.data.shape
    n, c, h, w = x.data.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    sh, sw = spec.stride
    if spec.padding == "same":
        (pt, pb), (pl, pr) = _same_pad(h, w, kh, kw, sh, sw)
    else:
        pt = pb = pl = pr = 0
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, sh, sw)               # (n, oh, ow, cin, kh, kw)
    n_, oh, ow = cols.shape[:3]
    cols2 = cols.reshape(n, oh * ow, cin * kh * kw)
    kmat = k.data.reshape(cout, cin * kh * kw)
    y = (cols2 @ kmat.T).transpose(0, 2, 1).reshape(n, cout, oh, ow)
    out = Tensor(y, _prev=_as_prev(x, k))
    if out._prev:
        def _bw(g):
            gm = g.reshape(n, cout, oh * ow).transpose(0, 2, 1)   # (n, ohw, cout)
            if k.requires_grad or k._backward is not None:
                dk = np.einsum("npo,npk->ok", gm, cols2)
                k.accumulate_grad(dk.reshape(k.data.shape))
            if x.requires_grad or x._backward is not None:
                dcols = (gm @ kmat).reshape(n, oh, ow, cin, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + oh * sh:sh, j:j + ow * sw:sw] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                x.accumulate_grad(dxp[:, :, pt:hp - pb, pl:wp - pr])
        out._backward = _bw
    return out


def conv2d_transpose(x: Tensor, spec: ConvSpec) -> Tensor:
    """Fractionally-strided convolution; adjoint of conv2d with the
    channel-swapped kernel."""
    k = spec.kernel
    cout, cin, kh, kw = k.data.shape
    n, c, h, w = x.data.shape
    if c != cin:
        raise ShapeError(f"conv2d_transpose: input has {c} channels, kernel expects {cin}")
    sh, sw = spec.stride
    oh, ow = (h - 1) * sh + kh, (w - 1) * sw + kw
    y = np.zeros((n, cout, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            # input pixel (a,b) contributes to output (a*sh+i, b*sw+j)
            y[:, :, i:i + h * sh:sh, j:j + w * sw:sw] += \
                np.einsum("nchw,oc->nohw", x.data, k.data[:, :, i, j])
    out = Tensor(y, _prev=_as_prev(x, k))
    if out._prev:
        def _bw(g):
            if x.requires_grad or x._backward is not None:
                dx = np.zeros_like(x.data)
                for i in range(kh):
                    for j in range(kw):
                        dx += np.einsum("nohw,oc->nchw",
                                        g[:, :, i:i + h * sh:sh, j:j + w * sw:sw],
                                        k.data[:, :, i, j])
                x.accumulate_grad(dx)
            if k.requires_grad or k._backward is not None:
                dk = np.empty_like(k.data)
                for i in range(kh):
                    for j in range(kw):
                        dk[:, :, i, j] = np.einsum(
                            "nohw,nchw->oc",
                            g[:, :, i:i + h * sh:sh, j:j + w * sw:sw], x.data)
                k.accumulate_grad(dk)
        out._backward = _bw
    return out


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    (row-major) maximal element of each window."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0],
                 _prev=_as_prev(x))
    if out._prev:
        def _bw(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
            dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2) \
                      .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            x.accumulate_grad(dx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient at x and central
    finite differences.  Run in float64.

    Networks with relu/maxpool are piecewise smooth: when a kink falls
    inside the difference interval the central estimate averages the two
    one-sided slopes and disagrees with the (correct) analytic gradient.
    Elements that miss at the base step are re-estimated with shrinking
    steps, which moves the kink outside the interval; a genuinely wrong
    gradient stays wrong at every step size.
    """
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check expects a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite function value in grad_check")
    y.backward()
    analytic = x.grad.copy().reshape(-1)
    flat = x.data.reshape(-1)

    def central(i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.detach()).data)
        flat[i] = orig - h
        fm = float(f(x.detach()).data)
        flat[i] = orig
        return (fp - fm) / (2.0 * h)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    for i in range(flat.size):
        err = rel(analytic[i], central(i, step))
        for h in (step / 8, step / 64):
            if err < 1e-6:
                break
            err = min(err, rel(analytic[i], central(i, h)))
        worst = max(worst, err)
    return worst
