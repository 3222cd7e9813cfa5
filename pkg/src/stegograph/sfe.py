"""Feature enhancement stage: stride-1, pooling-free residual layers that
keep weak signals alive, fused by channel concatenation.

One enhancement module holds two layers (SFELs) in series. Each SFEL runs a
conv-BN-relu-conv-BN main path next to a 1x1-conv shortcut and applies a
ReLU after the add. The module output re-fuses the shallow and deep layer
outputs: relu(BN(1x1_fuse(concat(y1, y2)))). Nothing in this stage ever
changes the spatial resolution or the 30-channel width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BnState, Tensor

CHANNELS = 30


def he_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """He initialization: Normal(0, sqrt(2 / fan_in)), fan_in = kh*kw*C_in."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ConvBn:
    """A convolution (weights + biases) paired with its BN layer."""
    weight: Tensor
    bias: Tensor
    bn: BnState


def init_conv_bn(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> ConvBn:
    return ConvBn(
        weight=Tensor(he_normal(rng, (c_out, c_in, k, k)), requires_grad=True),
        bias=Tensor(np.full(c_out, 0.2), requires_grad=True),
        bn=BnState(c_out),
    )


@dataclass
class SfelParams:
    """One enhancement layer: two 3x3 convs plus a 1x1 shortcut, all stride 1."""
    conv1: ConvBn
    conv2: ConvBn
    shortcut: ConvBn


@dataclass
class SfeParams:
    """Two SFELs in series plus the 1x1 fusion back to 30 channels."""
    sfel_a: SfelParams
    sfel_b: SfelParams
    fuse: ConvBn


def init_sfel(rng: np.random.Generator) -> SfelParams:
    return SfelParams(
        conv1=init_conv_bn(rng, CHANNELS, CHANNELS, 3),
        conv2=init_conv_bn(rng, CHANNELS, CHANNELS, 3),
        shortcut=init_conv_bn(rng, CHANNELS, CHANNELS, 1),
    )


def init_sfe(rng: np.random.Generator) -> SfeParams:
    return SfeParams(
        sfel_a=init_sfel(rng),
        sfel_b=init_sfel(rng),
        fuse=init_conv_bn(rng, CHANNELS, 2 * CHANNELS, 1),
    )


def sfel_forward(x: Tensor, p: SfelParams, training: bool) -> Tensor:
    """relu(BN(conv2(relu(BN(conv1(x))))) + BN(shortcut(x))); dims unchanged."""
    main = T.batch_norm(T.conv2d(x, p.conv1.weight, p.conv1.bias, 1, 1),
                        p.conv1.bn, training)
    main = T.batch_norm(T.conv2d(T.relu(main), p.conv2.weight, p.conv2.bias, 1, 1),
                        p.conv2.bn, training)
    short = T.batch_norm(T.conv2d(x, p.shortcut.weight, p.shortcut.bias, 1, 0),
                         p.shortcut.bn, training)
    out = T.relu(main + short)
    assert out.shape == x.shape
    return out


def sfe_forward(x: Tensor, p: SfeParams, training: bool) -> Tensor:
    """Chain both SFELs and fuse their outputs back to 30 channels."""
    y1 = sfel_forward(x, p.sfel_a, training)
    y2 = sfel_forward(y1, p.sfel_b, training)
    cat = T.concat_channels(y1, y2)
    fused = T.batch_norm(T.conv2d(cat, p.fuse.weight, p.fuse.bias, 1, 0),
                         p.fuse.bn, training)
    out = T.relu(fused)
    assert out.shape == x.shape
    return out


def sfel_param_count(c: int = CHANNELS) -> int:
    """Closed-form parameter count of one SFEL (convs, biases, BN affine)."""
    conv3 = c * c * 9 + c + 2 * c  # weight + bias + gamma/beta
    conv1 = c * c * 1 + c + 2 * c
    return 2 * conv3 + conv1


def sfe_param_count(c: int = CHANNELS) -> int:
    """Closed-form parameter count of one SFE module."""
    fuse = c * (2 * c) + c + 2 * c
    return 2 * sfel_param_count(c) + fuse
