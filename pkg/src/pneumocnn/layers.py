"""Layer forward/backward passes.

Every forward op returns ``(output, ForwardCache)``; the matching backward op
takes that cache plus the upstream gradient and returns
``(grad_input, param_grads)``. Arithmetic is done in float64 and the result
is cast back to the input's dtype, so the same code serves float32 training
and the float64 gradient-check harness.

Parameters live in plain dicts of arrays:

* conv: ``weight`` [out, in, kh, kw], ``bias`` [out]
* separable conv: ``depthwise`` [c, 1, kh, kw], ``pointwise`` [out, c, 1, 1], ``bias`` [out]
* dense: ``weight`` [out, in], ``bias`` [out]
* batch norm: ``gamma``, ``beta``, ``running_mean``, ``running_var`` (all [c])
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ParameterError, ShapeError, StatisticsError, UsageError
from .tensor import PCG32

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ForwardCache:
    kind: str
    mode: Mode
    params: Any
    in_shape: tuple
    out_shape: tuple
    saved: dict = field(default_factory=dict)


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _check_4d(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an (N, C, H, W) tensor, got shape {x.shape}")


# --- convolution -----------------------------------------------------------

def _pad_same(x, kh, kw):
    return np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))


def _im2col(xp_n, kh, kw, h, w):
    c = xp_n.shape[0]
    cols = np.empty((c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp_n[:, i:i + h, j:j + w]
    return cols.reshape(c * kh * kw, h * w)


def _check_kernel(weight):
    kh, kw = weight.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel sizes, got {kh}x{kw}")


def conv2d_forward(x, p, mode=Mode.EVAL):
    """Stride-1 cross-correlation with zero "same" padding, plus per-channel bias."""
    _check_4d(x, "conv2d")
    weight = p["weight"]
    _check_kernel(weight)
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if in_c != c:
        raise ShapeError(f"conv2d expects {in_c} input channels, got {c}")
    wm = _f64(weight).reshape(out_c, -1)
    xp = _pad_same(_f64(x), kh, kw)
    out = np.empty((n, out_c, h, w))
    for k in range(n):
        out[k] = (wm @ _im2col(xp[k], kh, kw, h, w)).reshape(out_c, h, w)
    out += _f64(p["bias"])[None, :, None, None]
    y = out.astype(x.dtype)
    return y, ForwardCache("conv2d", mode, p, x.shape, y.shape, {"x": x})


def conv2d_backward(cache, grad_out):
    p = cache.params
    x = cache.saved["x"]
    weight = p["weight"]
    n, c, h, w = x.shape
    out_c, _, kh, kw = weight.shape
    wm = _f64(weight).reshape(out_c, -1)
    g = _f64(grad_out)
    xp = _pad_same(_f64(x), kh, kw)
    gw = np.zeros_like(wm)
    gxp = np.zeros_like(xp)
    for k in range(n):
        cols = _im2col(xp[k], kh, kw, h, w)
        gk = g[k].reshape(out_c, h * w)
        gw += gk @ cols.T
        gcols = (wm.T @ gk).reshape(c, kh, kw, h, w)
        for i in range(kh):
            for j in range(kw):
                gxp[k, :, i:i + h, j:j + w] += gcols[:, i, j]
    gx = gxp[:, :, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w]
    grads = {
        "weight": gw.reshape(weight.shape).astype(weight.dtype),
        "bias": g.sum(axis=(0, 2, 3)).astype(p["bias"].dtype),
    }
    return gx.astype(x.dtype), grads


def _depthwise(xp, dw, h, w):
    kh, kw = dw.shape[2:]
    out = np.zeros((xp.shape[0], xp.shape[1], h, w))
    for i in range(kh):
        for j in range(kw):
            out += dw[None, :, 0, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    return out


def separable_conv2d_forward(x, p, mode=Mode.EVAL):
    """Depthwise 3x3 (same padding) per channel, then a 1x1 pointwise mix, then bias."""
    _check_4d(x, "separable conv")
    dw, pw = p["depthwise"], p["pointwise"]
    _check_kernel(dw)
    n, c, h, w = x.shape
    if dw.shape[0] != c or dw.shape[1] != 1:
        raise ShapeError(f"depthwise kernels {dw.shape} do not match {c} input channels")
    if pw.shape[1] != c or pw.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernels {pw.shape} do not match {c} input channels")
    kh, kw = dw.shape[2:]
    mid = _depthwise(_pad_same(_f64(x), kh, kw), _f64(dw), h, w)
    pwm = _f64(pw)[:, :, 0, 0]
    out = np.einsum("oc,nchw->nohw", pwm, mid, optimize=True)
    out += _f64(p["bias"])[None, :, None, None]
    y = out.astype(x.dtype)
    return y, ForwardCache("separable_conv2d", mode, p, x.shape, y.shape, {"x": x, "mid": mid})


def separable_conv2d_backward(cache, grad_out):
    p = cache.params
    x, mid = cache.saved["x"], cache.saved["mid"]
    dw, pw = p["depthwise"], p["pointwise"]
    n, c, h, w = x.shape
    kh, kw = dw.shape[2:]
    g = _f64(grad_out)
    pwm = _f64(pw)[:, :, 0, 0]
    g_pw = np.einsum("nohw,nchw->oc", g, mid, optimize=True)
    g_mid = np.einsum("oc,nohw->nchw", pwm, g, optimize=True)
    xp = _pad_same(_f64(x), kh, kw)
    g_dw = np.empty((c, kh, kw))
    gxp = np.zeros_like(xp)
    dw64 = _f64(dw)
    for i in range(kh):
        for j in range(kw):
            g_dw[:, i, j] = np.einsum("nchw,nchw->c", g_mid, xp[:, :, i:i + h, j:j + w])
            gxp[:, :, i:i + h, j:j + w] += dw64[None, :, 0, i, j, None, None] * g_mid
    gx = gxp[:, :, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w]
    grads = {
        "depthwise": g_dw.reshape(dw.shape).astype(dw.dtype),
        "pointwise": g_pw.reshape(pw.shape).astype(pw.dtype),
        "bias": g.sum(axis=(0, 2, 3)).astype(p["bias"].dtype),
    }
    return gx.astype(x.dtype), grads


# --- pooling ---------------------------------------------------------------

def maxpool2x2_forward(x, mode=Mode.EVAL):
    """Non-overlapping 2x2 max pool; a trailing odd row/column is dropped."""
    _check_4d(x, "maxpool")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool needs spatial size >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, ForwardCache("maxpool2x2", mode, None, x.shape, y.shape, {"argmax": idx})


def maxpool2x2_backward(cache, grad_out):
    n, c, h, w = cache.in_shape
    idx = cache.saved["argmax"]
    h2, w2 = h // 2, w // 2
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    gx = np.zeros(cache.in_shape, dtype=grad_out.dtype)
    gx[:, :, :2 * h2, :2 * w2] = win
    return gx, {}


# --- batch normalization -----------------------------------------------------

def batchnorm_forward(x, p, mode=Mode.EVAL, momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel batch norm over (N, H, W).

    Train mode normalizes with the biased batch statistics and updates
    ``p["running_mean"]``/``p["running_var"]`` in place; Eval mode reads them.
    """
    _check_4d(x, "batchnorm")
    c = x.shape[1]
    if p["gamma"].shape != (c,):
        raise ShapeError(f"batchnorm has {p['gamma'].shape[0]} channels, input has {c}")
    x64 = _f64(x)
    gamma = _f64(p["gamma"])[None, :, None, None]
    beta = _f64(p["beta"])[None, :, None, None]
    if mode is Mode.TRAIN:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise StatisticsError(f"batchnorm needs at least 2 values per channel in train mode, got {m}")
        mean = x64.mean(axis=(0, 2, 3))
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        rm, rv = p["running_mean"], p["running_var"]
        rm[...] = (momentum * _f64(rm) + (1 - momentum) * mean).astype(rm.dtype)
        rv[...] = (momentum * _f64(rv) + (1 - momentum) * var).astype(rv.dtype)
    else:
        mean = _f64(p["running_mean"])
        var = _f64(p["running_var"])
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = (gamma * xhat + beta).astype(x.dtype)
    return y, ForwardCache("batchnorm", mode, p, x.shape, y.shape, {"xhat": xhat, "inv_std": inv_std})


def batchnorm_backward(cache, grad_out):
    p = cache.params
    xhat, inv_std = cache.saved["xhat"], cache.saved["inv_std"]
    g = _f64(grad_out)
    n, c, h, w = g.shape
    m = n * h * w
    g_beta = g.sum(axis=(0, 2, 3))
    g_gamma = (g * xhat).sum(axis=(0, 2, 3))
    g_xhat = g * _f64(p["gamma"])[None, :, None, None]
    gx = (inv_std[None, :, None, None] / m) * (
        m * g_xhat
        - g_xhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (g_xhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    grads = {"gamma": g_gamma.astype(p["gamma"].dtype), "beta": g_beta.astype(p["beta"].dtype)}
    return gx.astype(grad_out.dtype), grads


# --- dropout ---------------------------------------------------------------

def dropout_forward(x, rate, rng: PCG32 | None = None, mode=Mode.EVAL):
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is Mode.EVAL or rate == 0.0:
        return x.copy(), ForwardCache("dropout", mode, None, x.shape, x.shape, {"scale": None})
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= rate
    scale = keep / (1.0 - rate)
    y = (_f64(x) * scale).astype(x.dtype)
    return y, ForwardCache("dropout", mode, None, x.shape, y.shape, {"scale": scale})


def dropout_backward(cache, grad_out):
    scale = cache.saved["scale"]
    if scale is None:
        return grad_out.copy(), {}
    return (_f64(grad_out) * scale).astype(grad_out.dtype), {}


# --- dense -----------------------------------------------------------------

def dense_forward(x, p, mode=Mode.EVAL):
    """``x @ W.T + b`` for x of shape (N, in)."""
    weight = p["weight"]
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense layer expects (N, {weight.shape[1]}) input, got {x.shape}")
    y = (_f64(x) @ _f64(weight).T + _f64(p["bias"])).astype(x.dtype)
    return y, ForwardCache("dense", mode, p, x.shape, y.shape, {"x": x})


def dense_backward(cache, grad_out):
    p = cache.params
    x = _f64(cache.saved["x"])
    g = _f64(grad_out)
    grads = {
        "weight": (g.T @ x).astype(p["weight"].dtype),
        "bias": g.sum(axis=0).astype(p["bias"].dtype),
    }
    return (g @ _f64(p["weight"])).astype(grad_out.dtype), grads


# --- activations -------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation_forward(x, kind, mode=Mode.EVAL):
    x64 = _f64(x)
    if kind == "relu":
        y = np.maximum(x64, 0.0).astype(x.dtype)
        saved = {"positive": x64 > 0}
    elif kind == "sigmoid":
        s = _sigmoid(x64)
        # keep outputs strictly inside (0, 1) after rounding to the storage dtype
        lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
        hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
        y = np.clip(s.astype(x.dtype), lo, hi)
        saved = {"y": s}
    else:
        raise ParameterError(f"unknown activation {kind!r}")
    return y, ForwardCache(kind, mode, None, x.shape, y.shape, saved)


def activation_backward(cache, grad_out):
    g = _f64(grad_out)
    if cache.kind == "relu":
        gx = g * cache.saved["positive"]
    else:
        s = cache.saved["y"]
        gx = g * s * (1.0 - s)
    return gx.astype(grad_out.dtype), {}


# --- layer objects -----------------------------------------------------------

class Layer:
    kind = "layer"
    params: dict = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        raise NotImplementedError

    def _backward(self, cache, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, dtype=np.float32):
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return conv2d_forward(x, self.params, mode)

    def _backward(self, cache, grad_out):
        return conv2d_backward(cache, grad_out)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.params["weight"].shape[1]:
            raise ShapeError(f"conv2d expects {self.params['weight'].shape[1]} channels, got {c}")
        return (self.params["weight"].shape[0], h, w)

    def __repr__(self):
        o, i, k, _ = self.params["weight"].shape
        return f"Conv2D({i}->{o}, {k}x{k})"


class SeparableConv2D(Layer):
    kind = "separable_conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, dtype=np.float32):
        self.params = {
            "depthwise": np.zeros((in_channels, 1, kernel, kernel), dtype=dtype),
            "pointwise": np.zeros((out_channels, in_channels, 1, 1), dtype=dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return separable_conv2d_forward(x, self.params, mode)

    def _backward(self, cache, grad_out):
        return separable_conv2d_backward(cache, grad_out)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.params["depthwise"].shape[0]:
            raise ShapeError(f"separable conv expects {self.params['depthwise'].shape[0]} channels, got {c}")
        return (self.params["pointwise"].shape[0], h, w)

    def __repr__(self):
        o, i = self.params["pointwise"].shape[:2]
        return f"SeparableConv2D({i}->{o})"


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def __init__(self):
        self.params = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return maxpool2x2_forward(x, mode)

    def _backward(self, cache, grad_out):
        return maxpool2x2_backward(cache, grad_out)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs spatial size >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPSILON, dtype=np.float32):
        if eps <= 0:
            raise ParameterError("batchnorm epsilon must be positive")
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return batchnorm_forward(x, self.params, mode, self.momentum, self.eps)

    def _backward(self, cache, grad_out):
        return batchnorm_backward(cache, grad_out)

    def output_shape(self, in_shape):
        if in_shape[0] != self.params["gamma"].shape[0]:
            raise ShapeError(f"batchnorm has {self.params['gamma'].shape[0]} channels, input has {in_shape[0]}")
        return in_shape

    def __repr__(self):
        return f"BatchNorm({self.params['gamma'].shape[0]})"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.params = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return dropout_forward(x, self.rate, rng, mode)

    def _backward(self, cache, grad_out):
        return dropout_backward(cache, grad_out)

    def __repr__(self):
        return f"Dropout({self.rate})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.params = {
            "weight": np.zeros((out_features, in_features), dtype=dtype),
            "bias": np.zeros(out_features, dtype=dtype),
        }

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return dense_forward(x, self.params, mode)

    def _backward(self, cache, grad_out):
        return dense_backward(cache, grad_out)

    def output_shape(self, in_shape):
        if in_shape != (self.params["weight"].shape[1],):
            raise ShapeError(f"dense layer expects {self.params['weight'].shape[1]} features, got {in_shape}")
        return (self.params["weight"].shape[0],)

    def __repr__(self):
        o, i = self.params["weight"].shape
        return f"Dense({i}->{o})"


class Activation(Layer):
    def __init__(self, kind):
        if kind not in ("relu", "sigmoid"):
            raise ParameterError(f"unknown activation {kind!r}")
        self.kind = kind
        self.params = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        return activation_forward(x, self.kind, mode)

    def _backward(self, cache, grad_out):
        return activation_backward(cache, grad_out)

    def __repr__(self):
        return f"Activation({self.kind})"


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self.params = {}

    def forward(self, x, mode=Mode.EVAL, rng=None):
        y = x.reshape(x.shape[0], -1)
        return y, ForwardCache("flatten", mode, None, x.shape, y.shape)

    def _backward(self, cache, grad_out):
        return grad_out.reshape(cache.in_shape), {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def backward(layer: Layer, cache: ForwardCache, grad_out):
    """Analytic gradients of ``layer``'s forward map at the point recorded in ``cache``.

    Returns ``(grad_input, param_grads)`` where ``param_grads`` has one entry
    per trainable parameter (batch-norm running statistics excluded).
    """
    if cache.kind != layer.kind:
        raise UsageError(f"cache from a {cache.kind} forward pass cannot drive {layer.kind} backward")
    if cache.params is not None and cache.params is not layer.params:
        raise UsageError(f"cache belongs to a different {layer.kind} layer")
    if cache.mode is not Mode.TRAIN:
        raise UsageError("backward needs a cache produced in train mode")
    if tuple(grad_out.shape) != tuple(cache.out_shape):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {cache.out_shape}")
    return layer._backward(cache, grad_out)
