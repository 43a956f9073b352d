"""Desk-scale backbone, GAP-linear classifier head and class activation maps."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"SSCCKPT1"


class Conv2d:
    def __init__(self, c_in, c_out, k=3, stride=1, padding=1, rng=None, dtype=np.float64,
                 name="conv", gain=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        bound = gain * np.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class GroupNorm:
    def __init__(self, channels, groups, dtype=np.float64, name="norm"):
        self.groups = groups
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return T.group_norm(x, self.weight, self.bias, self.groups)

    def parameters(self):
        return [self.weight, self.bias]


@dataclass(frozen=True)
class BackboneConfig:
    in_height: int = 64
    in_width: int = 48
    channels: tuple = (16, 32, 64, 64, 512)
    strides: tuple = (2, 2, 2, 1, 1)
    kernels: tuple | None = (3, 3, 3, 3, 1)
    input_center: float = 0.5
    input_scale: float = 4.0
    init_gain: float = 0.2
    norm_groups: int = 8

    def __post_init__(self):
        n = len(self.channels)
        if len(self.strides) != n or (self.kernels is not None and len(self.kernels) != n):
            raise ValueError(f"channels, strides and kernels need one entry per layer ({n})")

    @property
    def out_channels(self):
        return self.channels[-1]

    def feature_extents(self):
        h, w = self.in_height, self.in_width
        for k, s in zip(self.kernel_sizes(), self.strides):
            p = k // 2
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        return h, w

    def kernel_sizes(self):
        if self.kernels is None:
            return (3,) * len(self.channels)
        return tuple(self.kernels)


class Backbone:
    """Stack of conv + relu blocks; three stride-2 stages and a wide 1x1 stage by default."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), rng=None, dtype=np.float64):
        self.config = config
        c_in = 3
        self.blocks, self.norms = [], []
        layers = zip(config.channels, config.strides, config.kernel_sizes())
        for i, (c, s, k) in enumerate(layers):
            self.blocks.append(Conv2d(c_in, c, k, s, k // 2, rng=rng, dtype=dtype,
                                      name=f"backbone.{i}", gain=config.init_gain))
            if config.norm_groups:
                self.norms.append(GroupNorm(c, config.norm_groups, dtype=dtype,
                                            name=f"backbone.{i}.norm"))
            c_in = c
        h, w = config.feature_extents()
        if h < 2 or w < 2:
            raise ShapeError(f"feature map {h}x{w} too small for input "
                             f"{config.in_height}x{config.in_width}")

    def __call__(self, images):
        images = T.as_tensor(images)
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.in_height, cfg.in_width):
            raise ShapeError(f"expected (b, 3, {cfg.in_height}, {cfg.in_width}) input, "
                             f"got {images.shape}")
        x = (images - cfg.input_center) * cfg.input_scale
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.norms:
                x = self.norms[i](x)
            x = T.relu(x)
        return x

    def parameters(self):
        params = []
        for i, block in enumerate(self.blocks):
            params += block.parameters()
            if self.norms:
                params += self.norms[i].parameters()
        return params


class ClassifierHead:
    """``z = GAP(F) W^T + bias``; row ``m`` of ``W`` also defines attribute m's CAM."""

    def __init__(self, channels, num_attributes, rng=None, dtype=np.float64, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(channels)
        self.weight = Tensor(rng.uniform(-bound, bound, (num_attributes, channels)).astype(dtype),
                             requires_grad=True, name="head.weight")
        self.bias = (Tensor(np.zeros(num_attributes, dtype=dtype), requires_grad=True,
                            name="head.bias") if bias else None)

    def __call__(self, features):
        features = T.as_tensor(features)
        if features.ndim != 4 or features.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"head expects {self.weight.shape[1]} channels, got {features.shape}")
        pooled = T.reduce(features, "mean", axis=(2, 3))
        z = T.matmul(pooled, T.transpose(self.weight))
        if self.bias is not None:
            z = z + self.bias
        return z

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class FeatureBatch:
    features: Tensor
    logits: Tensor
    probs: np.ndarray
    labels: np.ndarray | None = None

    @property
    def batch_size(self):
        return self.features.shape[0]


class Model:
    def __init__(self, num_attributes=8, config: BackboneConfig = BackboneConfig(), seed=0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.backbone = Backbone(config, rng=rng, dtype=dtype)
        self.head = ClassifierHead(config.out_channels, num_attributes, rng=rng, dtype=dtype)

    @property
    def num_attributes(self):
        return self.head.weight.shape[0]

    def __call__(self, images, labels=None) -> FeatureBatch:
        images = T.as_tensor(np.asarray(images.data if isinstance(images, Tensor) else images,
                                        dtype=self.dtype))
        features = self.backbone(images)
        logits = self.head(features)
        return FeatureBatch(features, logits, T.stable_sigmoid(logits.data), labels)

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def classify(features, head: ClassifierHead):
    """Return logits and probabilities for a feature batch."""
    z = head(features)
    return z, T.stable_sigmoid(z.data)


def compute_cams(features, weight):
    """Signed CAMs: ``A[i, m, x, y] = sum_c W[m, c] F[i, c, x, y]`` (no bias, no relu).

    Accepts tensors (differentiable in both arguments) or plain arrays.
    """
    if isinstance(weight, ClassifierHead):
        weight = weight.weight
    if isinstance(features, Tensor) or isinstance(weight, Tensor):
        f, w = T.as_tensor(features), T.as_tensor(weight)
        if f.ndim != 4 or w.ndim != 2 or f.shape[1] != w.shape[1]:
            raise ShapeError(f"cams need (b, C, H, W) and (M, C); got {f.shape}, {w.shape}")
        return T.einsum("mc,bchw->bmhw", w, f)
    f, w = np.asarray(features), np.asarray(weight)
    if f.ndim != 4 or w.ndim != 2 or f.shape[1] != w.shape[1]:
        raise ShapeError(f"cams need (b, C, H, W) and (M, C); got {f.shape}, {w.shape}")
    return T.contract("mc", "bchw", "bmhw", w, f)


# -- checkpoint format -------------------------------------------------------
# magic "SSCCKPT1", then per parameter: u32 name length, utf-8 name, u32 rank,
# rank x u32 extents, float32 little-endian data.  Records run to end of file.

def save_checkpoint(path, state: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in state.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SSCCKPT1 checkpoint")
    state, pos = {}, 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            state[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return state


def model_from_checkpoint(path, config: BackboneConfig | None = None, dtype=np.float32) -> Model:
    state = load_checkpoint(path)
    head = state["head.weight"]
    if config is None:
        config = BackboneConfig()
    model = Model(head.shape[0], config, dtype=dtype)
    model.load_state_dict(state)
    return model
