"""Frozen residual backbone: stem, four blocks of sub-blocks, pooled features, heads.

A sub-block is two conv-BN-ReLU stages plus a skip that adds the sub-block
input back in, ``out = stage(x) + adapt(x)``. When the stage changes shape the
skip goes through a parameter-free adapter (average pooling plus channel
tiling), so the backbone never owns a trainable projection.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .init import kaiming_init, ones, zeros
from .optim import ConfigError
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

PRESETS = {
    "tiny": {"depths": (2, 2, 2, 2), "widths": (16, 32, 64, 128)},
    "small": {"depths": (3, 4, 6, 3), "widths": (16, 32, 64, 128)},
}


@dataclass(frozen=True)
class SubBlockSpec:
    in_channels: int
    out_channels: int
    stride: int
    identity_skip: bool = True


@dataclass(frozen=True)
class BlockSpec:
    subblocks: tuple[SubBlockSpec, ...]

    @property
    def k(self) -> int:
        return len(self.subblocks)

    @property
    def in_channels(self) -> int:
        return self.subblocks[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.subblocks[-1].out_channels

    @property
    def stride(self) -> int:
        return self.subblocks[0].stride


@dataclass
class HeadSpec:
    in_features: int
    classes: int
    weight: Tensor
    bias: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def num_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class Backbone:
    preset: str
    input_shape: tuple[int, int, int]
    blocks: list[BlockSpec]
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    head: HeadSpec
    stem_channels: int
    frozen: bool = False
    spatial: list[int] = field(default_factory=list)

    @property
    def feature_width(self) -> int:
        return self.blocks[-1].out_channels

    def parameters(self) -> list[Tensor]:
        return list(self.params.values()) + self.head.parameters()

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update({name: b for name, b in self.buffers.items()})
        out["head.weight"] = self.head.weight.data
        out["head.bias"] = self.head.bias.data
        return out


def _add_conv_bn(params, buffers, prefix, cin, cout, rng, dtype):
    params[f"{prefix}.conv"] = kaiming_init((cout, cin, 3, 3), 9 * cin, rng, dtype)
    params[f"{prefix}.bn.gamma"] = ones(cout, dtype)
    params[f"{prefix}.bn.beta"] = zeros(cout, dtype)
    buffers[f"{prefix}.bn.mean"] = np.zeros(cout, dtype=dtype)
    buffers[f"{prefix}.bn.var"] = np.ones(cout, dtype=dtype)


HEAD_INIT_STD = 0.01


def make_head(in_features: int, classes: int, rng: np.random.Generator, dtype=np.float32) -> HeadSpec:
    if classes < 2:
        raise ConfigError(f"a classifier head needs at least 2 classes, got {classes}")
    # a small random readout keeps the first logits near uniform; pooled features are not normalized
    w = Tensor((rng.standard_normal((classes, in_features)) * HEAD_INIT_STD).astype(dtype), requires_grad=True)
    return HeadSpec(in_features, classes, w, zeros(classes, dtype))


def build_backbone(preset: str, input_shape, base_classes: int, rng: np.random.Generator,
                   dtype=np.float32, widths=None, depths=None) -> Backbone:
    """Kaiming-initialized backbone; ``widths``/``depths`` override the preset (tests use tiny ones)."""
    if preset not in PRESETS and (widths is None or depths is None):
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS.get(preset, {})
    widths = tuple(widths or cfg["widths"])
    depths = tuple(depths or cfg["depths"])
    if len(widths) != len(depths) or any(k < 1 for k in depths):
        raise ConfigError("widths and depths must align and every block needs >= 1 sub-block")
    c, h, w = input_shape
    if min(h, w) < 16:
        raise ConfigError(f"input spatial extent must be >= 16, got {h}x{w}")

    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    stem = widths[0]
    _add_conv_bn(params, buffers, "stem", c, stem, rng, dtype)
    blocks, cin, size = [], stem, h
    spatial = [size]
    for b, (width, k) in enumerate(zip(widths, depths)):
        stride = 1 if b == 0 else 2
        subs = []
        for i in range(k):
            s = stride if i == 0 else 1
            sub = SubBlockSpec(cin if i == 0 else width, width, s)
            subs.append(sub)
            _add_conv_bn(params, buffers, f"block{b}.{i}.conv1", sub.in_channels, width, rng, dtype)
            _add_conv_bn(params, buffers, f"block{b}.{i}.conv2", width, width, rng, dtype)
        blocks.append(BlockSpec(tuple(subs)))
        size = -(-size // stride)
        spatial.append(size)
        cin = width
    head = make_head(widths[-1], base_classes, rng, dtype)
    return Backbone(preset, (c, h, w), blocks, params, buffers, head, stem, spatial=spatial)


def conv_bn_relu(net, prefix: str, x: Tensor, stride: int, training: bool) -> Tensor:
    """3x3 conv (no bias) -> BN -> ReLU, reading parameters from ``net.params``/``net.buffers``."""
    y = T.conv2d(x, net.params[f"{prefix}.conv"], None, stride=stride, padding=1)
    y = T.batch_norm(y, net.params[f"{prefix}.bn.gamma"], net.params[f"{prefix}.bn.beta"],
                     net.buffers[f"{prefix}.bn.mean"], net.buffers[f"{prefix}.bn.var"],
                     training=training, momentum=BN_MOMENTUM, eps=BN_EPS)
    return T.relu(y)


def shape_adapter(x: Tensor, pool: int, out_channels: int) -> Tensor:
    """Parameter-free map onto a summation point: average-pool, then tile channels."""
    if pool > 1:
        x = T.avg_pool2d(x, pool)
    return T.tile_channels(x, out_channels)


def stage(bb: Backbone, b: int, i: int, x: Tensor, training: bool = False) -> Tensor:
    sub = bb.blocks[b].subblocks[i]
    y = conv_bn_relu(bb, f"block{b}.{i}.conv1", x, sub.stride, training)
    return conv_bn_relu(bb, f"block{b}.{i}.conv2", y, 1, training)


def sub_block(bb: Backbone, b: int, i: int, x: Tensor, training: bool = False) -> Tensor:
    sub = bb.blocks[b].subblocks[i]
    out = stage(bb, b, i, x, training)
    if sub.identity_skip:
        out = T.add(out, shape_adapter(x, sub.stride, sub.out_channels))
    return out


def _check_training(bb: Backbone, training: bool) -> None:
    if training and bb.frozen:
        raise RuntimeError("a frozen backbone cannot run in training mode")


def check_input(bb: Backbone, x: Tensor) -> None:
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(bb.input_shape):
        raise T.ShapeError(f"batch shape {x.shape} does not match backbone input {bb.input_shape}")


def stem_forward(bb: Backbone, x: Tensor, training: bool = False) -> Tensor:
    check_input(bb, x)
    return conv_bn_relu(bb, "stem", x, 1, training)


def features(bb: Backbone, x, training: bool = False) -> Tensor:
    """Pooled representation after all blocks (the plain residual path)."""
    _check_training(bb, training)
    x = T.as_tensor(x)
    h = stem_forward(bb, x, training)
    for b, block in enumerate(bb.blocks):
        for i in range(block.k):
            h = sub_block(bb, b, i, h, training)
    return T.global_avg_pool(h)


def head_forward(head: HeadSpec, feats: Tensor) -> Tensor:
    return T.linear(feats, head.weight, head.bias)


def forward_base(bb: Backbone, x, training: bool = False) -> Tensor:
    return head_forward(bb.head, features(bb, x, training))


def attach_head(bb: Backbone, class_count: int, rng: np.random.Generator) -> HeadSpec:
    """A fresh classifier over the backbone's pooled features; the backbone is not touched."""
    return make_head(bb.feature_width, class_count, rng, bb.head.weight.dtype)


def digest(bb: Backbone) -> str:
    """SHA-256 over every parameter and running statistic, in name order."""
    h = hashlib.sha256()
    for name, arr in sorted(bb.named_tensors().items()):
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def backbone_params(bb: Backbone) -> int:
    """Weights + BN affine parameters + base head; running statistics excluded."""
    return sum(t.size for t in bb.params.values()) + bb.head.num_params()


def clone_backbone(bb: Backbone, requires_grad: bool | None = None) -> Backbone:
    """Deep copy with independent storage; used by the full fine-tuning baseline."""
    rg = (lambda t: t.requires_grad) if requires_grad is None else (lambda t: requires_grad)
    params = {k: Tensor(v.data.copy(), requires_grad=rg(v)) for k, v in bb.params.items()}
    buffers = {k: v.copy() for k, v in bb.buffers.items()}
    head = HeadSpec(bb.head.in_features, bb.head.classes,
                    Tensor(bb.head.weight.data.copy(), requires_grad=rg(bb.head.weight)),
                    Tensor(bb.head.bias.data.copy(), requires_grad=rg(bb.head.bias)))
    frozen = bb.frozen if requires_grad is None else not requires_grad
    return Backbone(bb.preset, bb.input_shape, list(bb.blocks), params, buffers, head,
                    bb.stem_channels, frozen, list(bb.spatial))
