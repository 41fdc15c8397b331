"""Small CNN classifier with hooks at the stem output and the last feature map.

Layout: 3x3 stem conv + relu (``f_first``), then one stride-2 3x3 conv + relu
per entry of ``block_channels`` (the last one is ``f_last``), global average
pooling to the feature vector ``z``, and a linear head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor, conv2d, elementwise_mul, global_avg_pool, linear, relu

MAGIC = b"DTPARAM1"


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    input_size: int = 32
    stem_channels: int = 16
    block_channels: tuple = (32, 64)
    num_classes: int = 4
    seed: int = 0

    def validate(self):
        if self.input_channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ValueError("block_channels must be a non-empty list of positive ints")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        factor = 2 ** len(self.block_channels)
        if self.input_size < factor or self.input_size % factor:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by the downsampling factor {factor}"
            )


@dataclass
class ForwardRecord:
    """Batched activations of one forward pass (leading axis = sample)."""

    f_first: Tensor
    f_last: Tensor
    features: Tensor
    logits: Tensor

    def per_sample(self):
        """Split into one record per sample, holding plain arrays."""
        return [
            ForwardRecord(self.f_first.data[i], self.f_last.data[i],
                          self.features.data[i], self.logits.data[i])
            for i in range(self.logits.shape[0])
        ]


@dataclass
class Model:
    config: BackboneConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def copy(self):
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in self.params.items()})

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays):
        if set(arrays) != set(self.params):
            raise ValueError("parameter names do not match the model")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = Tensor(np.asarray(v, dtype=DTYPE).copy(), requires_grad=True)


def build(config: BackboneConfig) -> Model:
    """Initialise parameters from a seeded He-uniform (fan-in) scheme; biases start at zero."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}

    def conv(name, cin, cout):
        bound = np.sqrt(6.0 / (cin * 9))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
        params[f"{name}.bias"] = np.zeros(cout)

    conv("stem", config.input_channels, config.stem_channels)
    cin = config.stem_channels
    for i, cout in enumerate(config.block_channels):
        conv(f"block{i + 1}", cin, cout)
        cin = cout
    bound = np.sqrt(1.0 / cin)
    params["head.weight"] = rng.uniform(-bound, bound, (config.num_classes, cin))
    params["head.bias"] = np.zeros(config.num_classes)
    return Model(config, {k: Tensor(v.astype(DTYPE), requires_grad=True) for k, v in params.items()})


def forward(model: Model, batch, mask=None, track_grad=True) -> ForwardRecord:
    """Run the network on an (N, C, H, W) batch.

    ``mask`` is an optional (N, h, w) array multiplied into the stem feature map
    (broadcast over its channels) before any later layer sees it. With
    ``track_grad=False`` no graph is recorded.
    """
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=DTYPE))
    if x.data.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ValueError(
            f"batch shape {x.shape} does not match (N, {cfg.input_channels}, "
            f"{cfg.input_size}, {cfg.input_size})"
        )
    p = model.params if track_grad else {k: Tensor(v.data) for k, v in model.params.items()}

    f_first = relu(conv2d(x, p["stem.weight"], p["stem.bias"], stride=1, padding=1))
    h = f_first
    if mask is not None:
        mask = np.asarray(mask, dtype=f_first.dtype)
        n, c, hh, ww = f_first.shape
        if mask.shape != (n, hh, ww):
            raise ValueError(f"mask shape {mask.shape} does not match stem map (N, h, w) = {(n, hh, ww)}")
        full = np.ascontiguousarray(np.broadcast_to(mask[:, None], f_first.shape))
        h = elementwise_mul(f_first, Tensor(full))
    for i in range(len(cfg.block_channels)):
        h = relu(conv2d(h, p[f"block{i + 1}.weight"], p[f"block{i + 1}.bias"], stride=2, padding=1))
    f_last = h
    z = global_avg_pool(f_last)
    logits = linear(z, p["head.weight"], p["head.bias"])
    return ForwardRecord(f_first, f_last, z, logits)


def sgd_step(model, loss: Tensor, lr: float):
    """Backpropagate ``loss`` and apply ``p <- p - lr * grad`` to every parameter."""
    params = model.parameters() if isinstance(model, Model) else list(model)
    for prm in params:
        prm.grad = None
    loss.backward()
    for prm in params:
        if prm.grad is not None:
            prm.data -= prm.data.dtype.type(lr) * prm.grad
        prm.grad = None


def copy_model(model: Model) -> Model:
    return model.copy()


# ---------------------------------------------------------------- checkpoint file
#
# magic "DTPARAM1" | u32 count | per tensor: u16 name length, utf-8 name,
# u8 ndim, u32 extents..., float32 little-endian values in row-major order

def save_params(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_params(path):
    """Read a parameter file into an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    off = 8
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(DTYPE)
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out
