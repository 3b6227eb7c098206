"""UNet encoder/decoder with concatenated skip connections.

Encoder stage k: [conv3x3 -> BN -> ReLU] x2 at width base*2^k, then 2x2 max pool.
Bottleneck at width base*2^depth.  Decoder stage k: stride-2 transposed conv
back to width base*2^k, concat with the stored encoder activation,
[conv3x3 -> BN -> ReLU] x2, Dropout2d.  A final 3x3 conv to out_channels
feeds a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .tensor import Rng, Tensor, concat_channels, relu, sigmoid


@dataclass
class UNetConfig:
    in_channels: int = 4
    depth: int = 4
    base_width: int = 16
    dropout_p: float = 0.1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"invalid UNet config {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def width(self, stage: int) -> int:
        return self.base_width * 2 ** stage

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock:
    """Two conv -> BN -> ReLU units."""

    def __init__(self, in_ch, out_ch):
        self.conv1 = L.Conv2dLayer(in_ch, out_ch)
        self.bn1 = L.BatchNorm2dLayer(out_ch)
        self.conv2 = L.Conv2dLayer(out_ch, out_ch)
        self.bn2 = L.BatchNorm2dLayer(out_ch)

    def layers(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]

    def __call__(self, x):
        x = relu(L.batchnorm2d(L.conv2d(x, self.conv1), self.bn1))
        return relu(L.batchnorm2d(L.conv2d(x, self.conv2), self.bn2))


class UNetModel:
    def __init__(self, config: UNetConfig):
        self.config = config
        self.mode = L.TRAIN
        d = config.depth
        self.encoders = []
        prev = config.in_channels
        for k in range(d):
            self.encoders.append(ConvBlock(prev, config.width(k)))
            prev = config.width(k)
        self.bottleneck = ConvBlock(prev, config.width(d))
        # decoders held in execution order: deepest stage first
        self.ups = []
        self.decoders = []
        for k in reversed(range(d)):
            self.ups.append(L.ConvTranspose2dLayer(config.width(k + 1), config.width(k)))
            self.decoders.append(ConvBlock(2 * config.width(k), config.width(k)))
        self.dropout = L.Dropout2dParams(config.dropout_p, L.TRAIN)
        self.head = L.Conv2dLayer(config.width(0), config.out_channels)
        self.dropout_rng = Rng(0).split("dropout")

    def named_layers(self):
        """(prefix, layer) pairs in the fixed checkpoint order."""
        d = self.config.depth
        out = []
        for k, block in enumerate(self.encoders):
            out += [(f"enc{k}.{name}", layer) for name, layer in block.layers()]
        out += [(f"bottleneck.{name}", layer) for name, layer in self.bottleneck.layers()]
        for i, k in enumerate(reversed(range(d))):
            out.append((f"dec{k}.up", self.ups[i]))
            out += [(f"dec{k}.{name}", layer) for name, layer in self.decoders[i].layers()]
        out.append(("head", self.head))
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": t for prefix, layer in self.named_layers() for name, t in layer.params().items()}

    def buffers(self) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": t for prefix, layer in self.named_layers() for name, t in layer.buffers().items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.parameters().items()}
        state.update({k: v.data for k, v in self.buffers().items()})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        tensors = {**self.parameters(), **self.buffers()}
        missing = set(tensors) - set(arrays)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, t in tensors.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: expected shape {list(t.shape)}, got {list(arr.shape)}")
            t.data = arr.astype(t.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def astype(self, dtype) -> "UNetModel":
        """Cast every parameter and buffer in place (float64 for gradient checks)."""
        for t in {**self.parameters(), **self.buffers()}.values():
            t.data = t.data.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters().values()))

    def __call__(self, x, trace=None):
        return forward(self, x, trace)


def build(config: UNetConfig, rng: Rng) -> UNetModel:
    """Construct and He-initialize a model.  ``rng`` is split into an init
    stream (consumed here, in checkpoint order) and a dropout stream."""
    model = UNetModel(config)
    init = rng.split("init")
    for _, layer in model.named_layers():
        L.init_he(layer, init)
    model.dropout_rng = rng.split("dropout")
    return model


def set_mode(model: UNetModel, mode: str) -> None:
    L._check_mode(mode)
    model.mode = mode
    model.dropout.mode = mode
    for _, layer in model.named_layers():
        if isinstance(layer, L.BatchNorm2dLayer):
            layer.mode = mode


def forward(model: UNetModel, x, trace: dict | None = None) -> Tensor:
    """Per-pixel burn-scar probabilities, shape [N, out_channels, H, W].

    If ``trace`` is a dict, stored encoder activations are put under
    ``enc{k}`` and the tensors actually concatenated under ``dec{k}.skip``.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = model.config
    if len(x.shape) != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [N, {cfg.in_channels}, H, W], got {list(x.shape)}")
    mult = 2 ** cfg.depth
    h, w = x.shape[2:]
    if h % mult or w % mult:
        raise ShapeError(f"height and width must be multiples of {mult} for depth {cfg.depth}, got {h}x{w}")

    skips = []
    for k, block in enumerate(model.encoders):
        x = block(x)
        skips.append(x)
        if trace is not None:
            trace[f"enc{k}"] = x
        x, _ = L.maxpool2x2(x)
    x = model.bottleneck(x)
    for i, k in enumerate(reversed(range(cfg.depth))):
        x = L.conv_transpose2d(x, model.ups[i])
        skip = skips[k]
        if trace is not None:
            trace[f"dec{k}.skip"] = skip
        x = concat_channels([x, skip])
        x = model.decoders[i](x)
        x = L.dropout2d(x, model.dropout, model.dropout_rng)
    return sigmoid(L.conv2d(x, model.head))
