"""Feature learning and classification: four downsampling CNN blocks and a
softmax classifier over a 256-D feature vector.

Blocks 1-3 halve the spatial dims: two 3x3 convs, then 3x3 average pooling
with stride 2, added to a 1x1 stride-2 shortcut (no ReLU after the add).
Block 4 drops the shortcut and ends in global average pooling, producing
one 256-D vector per image. Channel widths double per block: 32, 64, 128,
256. The final fully connected layer has no bias; training consumes its
logits, inference applies softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BnState, Tensor
from .sfe import CHANNELS, ConvBn, init_conv_bn, he_normal

WIDTHS = (32, 64, 128, 256)
FEATURE_DIM = WIDTHS[-1]


@dataclass
class CnnBlockParams:
    """Two 3x3 convs with BN; blocks 1-3 add a 1x1 stride-2 shortcut."""
    conv1: ConvBn
    conv2: ConvBn
    shortcut: ConvBn | None

    @property
    def has_shortcut(self) -> bool:
        return self.shortcut is not None


@dataclass
class BackboneParams:
    blocks: list[CnnBlockParams]
    fc: Tensor  # (2, FEATURE_DIM), no bias

    def __post_init__(self):
        if len(self.blocks) != 4:
            raise ValueError("backbone needs exactly 4 blocks")
        if self.fc.shape != (2, FEATURE_DIM):
            raise ValueError(f"fc must be (2, {FEATURE_DIM})")


def init_backbone(rng: np.random.Generator) -> BackboneParams:
    blocks = []
    c_in = CHANNELS
    for idx, c_out in enumerate(WIDTHS):
        last = idx == len(WIDTHS) - 1
        blocks.append(CnnBlockParams(
            conv1=init_conv_bn(rng, c_out, c_in, 3),
            conv2=init_conv_bn(rng, c_out, c_out, 3),
            shortcut=None if last else init_conv_bn(rng, c_out, c_in, 1),
        ))
        c_in = c_out
    fc = Tensor(rng.normal(0.0, 0.01, size=(2, FEATURE_DIM)), requires_grad=True)
    return BackboneParams(blocks=blocks, fc=fc)


def cnn_block_forward(x: Tensor, p: CnnBlockParams, training: bool) -> Tensor:
    """One downsampling block; the last (shortcut-free) block pools globally."""
    main = T.batch_norm(T.conv2d(x, p.conv1.weight, p.conv1.bias, 1, 1),
                        p.conv1.bn, training)
    main = T.batch_norm(T.conv2d(T.relu(main), p.conv2.weight, p.conv2.bias, 1, 1),
                        p.conv2.bn, training)
    if p.shortcut is None:
        return T.global_avg_pool(main)
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"spatial dims must be even, got {x.shape}")
    pooled = T.avg_pool2d(main, k=3, stride=2, pad=1)
    short = T.batch_norm(T.conv2d(x, p.shortcut.weight, p.shortcut.bias, 2, 0),
                         p.shortcut.bn, training)
    return pooled + short


def backbone_logits(fused: Tensor, p: BackboneParams, training: bool) -> Tensor:
    """Four blocks then the bias-free fully connected layer; returns (N, 2)."""
    if fused.ndim != 4:
        raise ValueError("expected a batched feature stack (N, C, h, w)")
    if fused.shape[-1] % 16 or fused.shape[-2] % 16:
        raise ValueError("spatial dims must be divisible by 16")
    x = fused
    for block in p.blocks:
        x = cnn_block_forward(x, block, training)
    return T.dense(x, p.fc)


def classify(fused: Tensor, p: BackboneParams, training: bool) -> Tensor:
    """Softmax probabilities [p_cover, p_stego] per image."""
    return T.softmax_last(backbone_logits(fused, p, training))


def backbone_param_count() -> int:
    """Closed-form count of backbone parameters (weights, biases, BN affine)."""
    total = 0
    c_in = CHANNELS
    for idx, c_out in enumerate(WIDTHS):
        total += c_out * c_in * 9 + c_out + 2 * c_out       # conv1 + bn
        total += c_out * c_out * 9 + c_out + 2 * c_out      # conv2 + bn
        if idx < len(WIDTHS) - 1:
            total += c_out * c_in + c_out + 2 * c_out       # 1x1 shortcut + bn
        c_in = c_out
    return total + 2 * FEATURE_DIM                          # fc, no bias
