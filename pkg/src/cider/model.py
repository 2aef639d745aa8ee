"""The CIdeR network: stem convolution plus four residual blocks.

Nine convolutional layers total (1 stem + 4 blocks x 2), each followed by
batch normalization. A block computes conv-BN-ReLU-conv-BN, adds the block
input through a skip connection (1x1 strided projection when the shape
changes), and applies a final ReLU. A global average pool and a linear
head reduce the feature maps to a single logit per sample; the sigmoid is
applied by callers.

Per-layer channel counts, kernel size, and strides are configuration; the
defaults double the channel count per block ([16, 32, 64, 128]) and halve
both spatial dims (stride 2) at each block.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, load_checkpoint, save_checkpoint
from .errors import InvalidConfig, ShapeTooSmall

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class CiderConfig:
    channels: tuple = (16, 32, 64, 128)
    kernel: int = 3
    strides: tuple = (2, 2, 2, 2)
    input_shape: tuple = (513, 376, 2)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise InvalidConfig("channels must be 4 positive integers")
        if len(self.strides) != 4 or any(s < 1 for s in self.strides):
            raise InvalidConfig("strides must be 4 positive integers")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig("kernel must be odd and positive")
        if len(self.input_shape) != 3:
            raise InvalidConfig("input_shape must be (F, W, depth)")

    @property
    def in_depth(self) -> int:
        return int(self.input_shape[2])

    @property
    def stride_product(self) -> int:
        p = 1
        for s in self.strides:
            p *= s
        return p

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "kernel": self.kernel,
                "strides": list(self.strides), "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "CiderConfig":
        return cls(channels=tuple(d["channels"]), kernel=int(d["kernel"]),
                   strides=tuple(d["strides"]), input_shape=tuple(d["input_shape"]))


@dataclass
class ModelParams:
    """Learnable tensors plus batch-norm running statistics."""

    config: CiderConfig
    seed: int
    tensors: dict = field(default_factory=dict)   # name -> Tensor (learnable)
    buffers: dict = field(default_factory=dict)   # name -> ndarray (running stats)

    def named_arrays(self) -> dict:
        out = {name: t.data for name, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        dup = ModelParams(self.config, self.seed)
        for name, t in self.tensors.items():
            dup.tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        dup.buffers = {name: b.copy() for name, b in self.buffers.items()}
        return dup

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: CiderConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic initialization: He-uniform convolutions, identity BN,
    zero head bias. The same seed always yields bitwise-identical parameters."""
    rng = np.random.default_rng(seed)
    params = ModelParams(config, seed)
    k = config.kernel

    def conv_param(name, cout, cin, ksize):
        fan_in = cin * ksize * ksize
        params.tensors[name] = Tensor(
            _he_uniform(rng, (cout, cin, ksize, ksize), fan_in, dtype),
            requires_grad=True)

    def bn_param(prefix, c):
        params.tensors[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype=dtype), True)
        params.tensors[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype=dtype), True)
        params.buffers[f"{prefix}.mean"] = np.zeros(c, dtype=dtype)
        params.buffers[f"{prefix}.var"] = np.ones(c, dtype=dtype)

    conv_param("stem.conv", config.channels[0], config.in_depth, k)
    bn_param("stem.bn", config.channels[0])

    in_ch = config.channels[0]
    for b, (out_ch, stride) in enumerate(zip(config.channels, config.strides), start=1):
        conv_param(f"block{b}.conv1", out_ch, in_ch, k)
        bn_param(f"block{b}.bn1", out_ch)
        conv_param(f"block{b}.conv2", out_ch, out_ch, k)
        bn_param(f"block{b}.bn2", out_ch)
        if stride != 1 or in_ch != out_ch:
            conv_param(f"block{b}.proj", out_ch, in_ch, 1)
        in_ch = out_ch

    head_dim = config.channels[-1]
    params.tensors["head.weight"] = Tensor(
        _he_uniform(rng, (head_dim, 1), head_dim, dtype), True)
    params.tensors["head.bias"] = Tensor(np.zeros(1, dtype=dtype), True)
    return params


def _bn(params: ModelParams, prefix: str, x: Tensor, mode: str) -> Tensor:
    return ad.batchnorm2d(
        x, params.tensors[f"{prefix}.gamma"], params.tensors[f"{prefix}.beta"],
        mode, params.buffers[f"{prefix}.mean"], params.buffers[f"{prefix}.var"],
        momentum=BN_MOMENTUM, eps=BN_EPS)


def forward(params: ModelParams, x, mode: str = "eval") -> Tensor:
    """Map a batch (N, depth, F, W) to N raw logits."""
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.data.ndim != 4 or x.shape[1] != cfg.in_depth:
        raise ShapeTooSmall(
            f"expected (N, {cfg.in_depth}, F, W) input, got {x.shape}")
    if min(x.shape[2], x.shape[3]) < cfg.stride_product:
        raise ShapeTooSmall(
            f"spatial dims {x.shape[2]}x{x.shape[3]} smaller than "
            f"stride product {cfg.stride_product}")

    pad = cfg.kernel // 2
    h = ad.conv2d(x, params.tensors["stem.conv"], stride=1, padding=pad)
    h = ad.relu(_bn(params, "stem.bn", h, mode))

    for b, stride in enumerate(cfg.strides, start=1):
        skip = h
        h = ad.conv2d(h, params.tensors[f"block{b}.conv1"], stride=stride, padding=pad)
        h = ad.relu(_bn(params, f"block{b}.bn1", h, mode))
        h = ad.conv2d(h, params.tensors[f"block{b}.conv2"], stride=1, padding=pad)
        h = _bn(params, f"block{b}.bn2", h, mode)
        proj_name = f"block{b}.proj"
        if proj_name in params.tensors:
            skip = ad.conv2d(skip, params.tensors[proj_name], stride=stride, padding=0)
        h = ad.relu(ad.add(skip, h))

    pooled = ad.global_avg_pool(h)
    logits = ad.linear(pooled, params.tensors["head.weight"], params.tensors["head.bias"])
    return ad.reshape(logits, (-1,))


def save_model(path, params: ModelParams, extra: dict | None = None) -> None:
    """Checkpoint + JSON sidecar (config, seed, and any run metadata)."""
    save_checkpoint(path, params.named_arrays())
    sidecar = {"config": params.config.to_dict(), "seed": params.seed}
    if extra:
        sidecar.update(extra)
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(path) -> tuple:
    """Returns (ModelParams, sidecar dict)."""
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    config = CiderConfig.from_dict(sidecar["config"])
    arrays = load_checkpoint(path)
    params = ModelParams(config, int(sidecar["seed"]))
    for name, arr in arrays.items():
        if name.endswith(".mean") or name.endswith(".var"):
            params.buffers[name] = arr
        else:
            params.tensors[name] = Tensor(arr, requires_grad=True)
    return params, sidecar
