"""Network assembly, whole-model forward/backward and checkpoint I/O.

Default layer stack for a 3x150x150 input::

    conv16 relu conv16 relu pool                       150 -> 75
    [sepconv f, batchnorm, relu, pool] for f in 32..256  75 -> 37 -> 18 -> 9 -> 4
    flatten (4096) dense512 relu drop.7 dense128 relu drop.5 dense64 relu drop.3
    dense1 sigmoid

Checkpoint layout (little-endian)::

    b"PNEU1" | u32 config length | config JSON (utf-8)
    | every parameter tensor in build order as float32
    | u64 checksum (8-byte BLAKE2b of all preceding bytes)
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ConfigError, CorruptCheckpointError, ShapeError
from .layers import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2x2,
    Mode,
    SeparableConv2D,
    backward,
)
from .tensor import PCG32

MAGIC = b"PNEU1"
_RUNNING_STATS = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    height: int = 150
    width: int = 150
    block1_filters: tuple = (16, 16)
    separable_filters: tuple = (32, 64, 128, 256)
    dense_units: tuple = (512, 128, 64)
    dropout_rates: tuple = (0.7, 0.5, 0.3)
    kernel: int = 3

    def __post_init__(self):
        for name in ("block1_filters", "separable_filters", "dense_units", "dropout_rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def validate(self) -> "ModelConfig":
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("input dimensions must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if not self.block1_filters or min(self.block1_filters) < 1:
            raise ConfigError("block 1 needs at least one conv layer with positive filters")
        if any(f < 1 for f in self.separable_filters):
            raise ConfigError("separable filter counts must be positive")
        if any(b <= a for a, b in zip(self.separable_filters, self.separable_filters[1:])):
            raise ConfigError(f"separable filter counts must increase strictly: {self.separable_filters}")
        if any(u < 1 for u in self.dense_units):
            raise ConfigError("dense unit counts must be positive")
        if len(self.dropout_rates) != len(self.dense_units):
            raise ConfigError("need exactly one dropout rate per dense layer")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        chain = self._chain()
        if min(chain[-1]) < 1:
            raise ConfigError(f"input {self.height}x{self.width} is too small for {len(chain) - 1} pooling stages")
        return self

    def _chain(self):
        h, w = self.height, self.width
        chain = [(h, w)]
        for _ in range(1 + len(self.separable_filters)):
            if h < 2 or w < 2:
                return chain + [(0, 0)]
            h, w = h // 2, w // 2
            chain.append((h, w))
        return chain

    def spatial_chain(self) -> list:
        """Spatial size after the input and after every pool (square inputs give ints)."""
        chain = self._chain()
        if self.height == self.width:
            return [h for h, _ in chain]
        return chain

    @property
    def flatten_size(self) -> int:
        h, w = self._chain()[-1]
        last = self.separable_filters[-1] if self.separable_filters else self.block1_filters[-1]
        return last * h * w

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class Model:
    config: ModelConfig
    layers: list = field(default_factory=list)

    def forward(self, x, mode=Mode.EVAL, rng: PCG32 | None = None):
        """Run every layer; returns ``(probabilities [n, 1], caches)``."""
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.channels, c.height, c.width):
            raise ShapeError(
                f"model expects (N, {c.channels}, {c.height}, {c.width}) input, got {tuple(x.shape)}"
            )
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode, rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out):
        """Backpropagate ``grad_out`` (d loss / d output); returns per-layer param grads."""
        grads = [None] * len(self.layers)
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = backward(self.layers[i], caches[i], g)
        return grads

    def backward_from_logits(self, caches, grad_logits):
        """Backpropagate a gradient taken w.r.t. the pre-sigmoid output, skipping the sigmoid."""
        if self.layers[-1].kind != "sigmoid":
            raise ShapeError("model does not end in a sigmoid")
        grads = [None] * len(self.layers)
        grads[-1] = {}
        g = grad_logits
        for i in range(len(self.layers) - 2, -1, -1):
            g, grads[i] = backward(self.layers[i], caches[i], g)
        return grads

    def parameters(self, trainable_only=False) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                if trainable_only and name in _RUNNING_STATS:
                    continue
                yield i, name, arr

    def num_parameters(self, trainable_only=True) -> int:
        return sum(a.size for _, _, a in self.parameters(trainable_only))


def _layers_for(config: ModelConfig) -> list:
    k = config.kernel
    layers: list[Layer] = []
    c = config.channels
    for f in config.block1_filters:
        layers += [Conv2D(c, f, k), Activation("relu")]
        c = f
    layers.append(MaxPool2x2())
    for f in config.separable_filters:
        layers += [SeparableConv2D(c, f, k), BatchNorm(f), Activation("relu"), MaxPool2x2()]
        c = f
    layers.append(Flatten())
    n = config.flatten_size
    for units, rate in zip(config.dense_units, config.dropout_rates):
        layers += [Dense(n, units), Activation("relu"), Dropout(rate)]
        n = units
    layers += [Dense(n, 1), Activation("sigmoid")]
    return layers


def _fan_in(layer: Layer, name: str) -> int | None:
    if name == "bias" or layer.kind == "batchnorm":
        return None
    shape = layer.params[name].shape
    return int(np.prod(shape[1:]))


def build_model(config: ModelConfig | None = None, rng: PCG32 | None = None) -> Model:
    """Instantiate the network; weights get He-normal init from ``rng`` (zeros if None)."""
    config = (config or ModelConfig()).validate()
    model = Model(config, _layers_for(config))
    shape = (config.channels, config.height, config.width)
    for layer in model.layers:
        shape = layer.output_shape(shape)
    if shape != (1,):
        raise ConfigError(f"network output shape {shape} is not (1,)")
    if rng is not None:
        for layer in model.layers:
            for name, arr in layer.params.items():
                fan_in = _fan_in(layer, name)
                if fan_in:
                    arr[...] = (rng.normal(arr.size) * math.sqrt(2.0 / fan_in)).reshape(arr.shape)
    return model


def forward(model: Model, batch, mode=Mode.EVAL, rng: PCG32 | None = None):
    return model.forward(batch, mode, rng)[0]


def predict_proba(model: Model, image) -> float:
    """Eval-mode probability for one preprocessed [C, H, W] image."""
    if image.ndim != 3:
        raise ShapeError(f"predict_proba expects a single [C, H, W] image, got {image.shape}")
    return float(forward(model, image[None], Mode.EVAL)[0, 0])


# --- checkpoints ---------------------------------------------------------------

def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for _, _, arr in model.parameters():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + _checksum(body)


def save_checkpoint(model: Model, sink: str | os.PathLike | BinaryIO) -> None:
    data = checkpoint_bytes(model)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


def _parse_config(data: bytes):
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + n > len(data):
        return None, None
    try:
        config = ModelConfig.from_dict(json.loads(data[start:start + n].decode()))
    except (ValueError, ConfigError):
        return None, None
    return config, start + n


def model_from_bytes(data: bytes) -> Model:
    if not data:
        raise CorruptCheckpointError("empty checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic: not a PNEU1 checkpoint")
    if len(data) < len(MAGIC) + 4 + 8:
        raise CorruptCheckpointError("truncated checkpoint header")
    body, tail = data[:-8], data[-8:]
    config, offset = _parse_config(data)
    expected = None
    if config is not None:
        expected = offset + 4 * sum(a.size for _, _, a in build_model(config).parameters()) + 8
    if _checksum(body) != tail:
        if expected is not None and len(data) < expected:
            raise CorruptCheckpointError(f"truncated checkpoint: {len(data)} bytes, expected {expected}")
        raise CorruptCheckpointError("checksum mismatch")
    if config is None:
        raise CorruptCheckpointError("unreadable model config")
    if len(data) != expected:
        raise CorruptCheckpointError(f"checkpoint size {len(data)} does not match config (expected {expected})")
    model = build_model(config)
    for _, _, arr in model.parameters():
        nbytes = 4 * arr.size
        arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    return model


def load_checkpoint(source: str | os.PathLike | BinaryIO | bytes) -> Model:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return model_from_bytes(data)
