"""3x3 convolution, 3x3 stride-2 transposed convolution, 2x2 max pooling,
batch normalization and channel dropout, each with its backward rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Rng, Tensor, default_dtype, make_output, note_pattern

TRAIN, EVAL = "train", "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode


class Conv2dLayer:
    """3x3 cross-correlation, stride 1, zero padding 1 (keeps H and W)."""

    stride = 1
    padding = 1

    def __init__(self, in_ch: int, out_ch: int):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Tensor(np.zeros((out_ch, in_ch, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class ConvTranspose2dLayer:
    """3x3 transposed convolution, stride 2, padding 1, output_padding 1.

    Output is exactly twice the input height and width.
    """

    stride = 2
    padding = 1
    output_padding = 1

    def __init__(self, in_ch: int, out_ch: int):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Tensor(np.zeros((in_ch, out_ch, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class BatchNorm2dLayer:
    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.mode = TRAIN
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = Tensor(np.zeros(ch))
        self.running_var = Tensor(np.ones(ch))

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class Dropout2dParams:
    p: float = 0.1
    mode: str = TRAIN

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")
        _check_mode(self.mode)


def _require_rank4(x: Tensor, op: str):
    if len(x.shape) != 4:
        raise ShapeError(f"{op} expects [N, C, H, W], got {list(x.shape)}")


def _nhwc(a):
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    _require_rank4(x, "conv2d")
    n, c, h, w = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, layer expects {layer.in_ch}")
    wt, bias = layer.weight, layer.bias
    cout = layer.out_ch
    # weight columns ordered (ki, kj, c) to match the channels-last im2col
    wmat = wt.data.transpose(0, 2, 3, 1).reshape(cout, 9 * c)
    xh = _nhwc(x.data)
    out = K.im2col(xh, 1, 1, h, w) @ wmat.T
    out += bias.data
    out = _nchw(out.reshape(n, h, w, cout))

    def back(g):
        gm = _nhwc(g).reshape(-1, cout)
        dx = dw = db = None
        if x.requires_grad:
            dx = _nchw(K.col2im(gm @ wmat, (n, h, w, c), 1, 1, h, w))
        if wt.requires_grad:
            # columns recomputed rather than held for the whole forward pass
            dw = (gm.T @ K.im2col(xh, 1, 1, h, w)).reshape(cout, 3, 3, c).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            db = gm.sum(axis=0)
        return dx, dw, db

    return make_output(out, (x, wt, bias), back, "conv2d")


def conv_transpose2d(x: Tensor, layer: ConvTranspose2dLayer) -> Tensor:
    _require_rank4(x, "conv_transpose2d")
    n, c, h, w = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, layer expects {layer.in_ch}")
    wt, bias = layer.weight, layer.bias
    cout = layer.out_ch
    wmat = wt.data.transpose(0, 2, 3, 1).reshape(c, 9 * cout)
    xm = _nhwc(x.data).reshape(-1, c)
    out = _nchw(K.col2im(xm @ wmat, (n, 2 * h, 2 * w, cout), 2, 1, h, w))
    out += bias.data[None, :, None, None]

    def back(g):
        gcols = K.im2col(_nhwc(g), 2, 1, h, w)
        dx = dw = db = None
        if x.requires_grad:
            dx = _nchw((gcols @ wmat.T).reshape(n, h, w, c))
        if wt.requires_grad:
            dw = (xm.T @ gcols).reshape(c, 3, 3, cout).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return make_output(out, (x, wt, bias), back, "conv_transpose2d")


def maxpool2x2(x: Tensor):
    """2x2 window, stride 2.  Returns (pooled, argmax) with argmax in 0..3
    (row-major within the window; first occurrence wins ties)."""
    _require_rank4(x, "maxpool2x2")
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    out, arg = K.maxpool_fwd(x.data)
    note_pattern(arg)
    return make_output(out, (x,), lambda g: (K.maxpool_bwd(g, arg),), "maxpool2x2"), arg


def batchnorm2d(x: Tensor, layer: BatchNorm2dLayer, mode: str | None = None) -> Tensor:
    _require_rank4(x, "batchnorm2d")
    mode = _check_mode(mode or layer.mode)
    n, c, h, w = x.shape
    if c != layer.ch:
        raise ShapeError(f"batchnorm2d: input has {c} channels, layer expects {layer.ch}")
    gamma, beta = layer.gamma, layer.beta
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    dtype = x.dtype

    if mode == EVAL:
        inv = (1.0 / np.sqrt(layer.running_var.data + layer.eps)).astype(dtype).reshape(1, c, 1, 1)
        xhat = (x.data - layer.running_mean.data.reshape(1, c, 1, 1)) * inv
        out = (g4 * xhat + b4).astype(dtype)

        def back_eval(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_output(out, (x, gamma, beta), back_eval, "batchnorm2d")

    m = n * h * w
    if m < 2:
        raise ContractError("batchnorm2d in train mode needs batch*H*W >= 2 per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = centered * inv
    out = (g4 * xhat + b4).astype(dtype)

    mom = layer.momentum
    layer.running_mean.data = ((1 - mom) * layer.running_mean.data + mom * mu.reshape(c)).astype(dtype)
    layer.running_var.data = ((1 - mom) * layer.running_var.data + mom * var.reshape(c)).astype(dtype)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * g4
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return dx, dgamma, dbeta

    return make_output(out, (x, gamma, beta), back, "batchnorm2d")


def dropout2d(x: Tensor, params: Dropout2dParams, rng: Rng | np.random.Generator) -> Tensor:
    """Zero whole (sample, channel) maps with probability p, scale survivors by 1/(1-p)."""
    _require_rank4(x, "dropout2d")
    if not 0.0 <= params.p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {params.p}")
    if _check_mode(params.mode) == EVAL or params.p == 0.0:
        return x
    gen = rng.generator if isinstance(rng, Rng) else rng
    n, c = x.shape[:2]
    keep = gen.random((n, c)) >= params.p
    scale = (keep / (1.0 - params.p)).astype(x.dtype)[:, :, None, None]
    return make_output(x.data * scale, (x,), lambda g: (g * scale,), "dropout2d")


def init_he(layer, rng: Rng) -> None:
    """Gaussian(0, sqrt(2/fan_in)) weights with fan_in = in_ch*9; zero biases,
    unit gamma, zero beta, running stats reset to (0, 1)."""
    dtype = default_dtype()
    if isinstance(layer, (Conv2dLayer, ConvTranspose2dLayer)):
        std = np.sqrt(2.0 / (layer.in_ch * 9))
        layer.weight.data = (rng.generator.standard_normal(layer.weight.shape) * std).astype(dtype)
        layer.bias.data = np.zeros(layer.out_ch, dtype=dtype)
    elif isinstance(layer, BatchNorm2dLayer):
        layer.gamma.data = np.ones(layer.ch, dtype=dtype)
        layer.beta.data = np.zeros(layer.ch, dtype=dtype)
        layer.running_mean.data = np.zeros(layer.ch, dtype=dtype)
        layer.running_var.data = np.ones(layer.ch, dtype=dtype)
    else:
        raise TypeError(f"init_he does not know {type(layer).__name__}")
