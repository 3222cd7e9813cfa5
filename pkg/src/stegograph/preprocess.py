"""Domain-knowledge front end: a 30-kernel high-pass residual filter bank,
truncated-linear activation, and batch normalization.

The bank is the canonical "spam" residual set: 8 first-order directional
differences, 4 second-order, 8 third-order, the 3x3 and 5x5 square
predictors and their 4+4 edge halves. Each kernel is built from integer
coefficients (so the zero-sum high-pass property holds exactly), centered
in a 5x5 support and scaled so its largest absolute coefficient is 1,
which keeps residual dynamic range comparable across kernels and makes a
single truncation threshold meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BnState, Tensor


def _center_embed(k: np.ndarray) -> np.ndarray:
    """Place a small odd-sized kernel at the center of a 5x5 support."""
    out = np.zeros((5, 5), dtype=np.int64)
    kh, kw = k.shape
    y, x = (5 - kh) // 2, (5 - kw) // 2
    out[y:y + kh, x:x + kw] = k
    return out


def _rot90s(k: np.ndarray, times: int) -> list[np.ndarray]:
    return [np.rot90(k, t) for t in range(times)]


def srm_bank_integer() -> np.ndarray:
    """The 30 filters as exact integer 5x5 kernels (before normalization)."""
    kernels: list[np.ndarray] = []

    # 8 first-order differences: neighbor minus center, all 8 directions
    for dy, dx in ((0, 1), (-1, 1), (-1, 0), (-1, -1),
                   (0, -1), (1, -1), (1, 0), (1, 1)):
        k = np.zeros((3, 3), dtype=np.int64)
        k[1, 1] = -1
        k[1 + dy, 1 + dx] = 1
        kernels.append(_center_embed(k))

    # 4 second-order differences: horizontal, vertical, both diagonals
    base2 = np.zeros((3, 3), dtype=np.int64)
    base2[1] = (1, -2, 1)
    diag2 = np.diag(np.array([1, -2, 1], dtype=np.int64))
    kernels += [_center_embed(base2), _center_embed(base2.T),
                _center_embed(diag2), _center_embed(diag2[::-1])]

    # 8 third-order differences along the same 8 directions
    taps3 = np.array([1, -3, 3, -1], dtype=np.int64)  # offsets -1, 0, +1, +2
    for dy, dx in ((0, 1), (-1, 1), (-1, 0), (-1, -1),
                   (0, -1), (1, -1), (1, 0), (1, 1)):
        k = np.zeros((5, 5), dtype=np.int64)
        for step, v in zip((-1, 0, 1, 2), taps3):
            k[2 + step * dy, 2 + step * dx] = v
        kernels.append(k)

    # SQUARE 3x3 and SQUARE 5x5 predictors
    sq3 = np.array([[-1, 2, -1],
                    [2, -4, 2],
                    [-1, 2, -1]], dtype=np.int64)
    sq5 = np.array([[-1, 2, -2, 2, -1],
                    [2, -6, 8, -6, 2],
                    [-2, 8, -12, 8, -2],
                    [2, -6, 8, -6, 2],
                    [-1, 2, -2, 2, -1]], dtype=np.int64)
    kernels += [_center_embed(sq3), sq5]

    # 4 EDGE 3x3: upper half of SQUARE 3x3, rotated to 4 orientations
    e3 = np.array([[-1, 2, -1],
                   [2, -4, 2],
                   [0, 0, 0]], dtype=np.int64)
    kernels += [_center_embed(r) for r in _rot90s(e3, 4)]

    # 4 EDGE 5x5: top three rows of SQUARE 5x5, rotated to 4 orientations
    e5 = sq5.copy()
    e5[3:] = 0
    kernels += _rot90s(e5, 4)

    bank = np.stack(kernels)
    assert bank.shape == (30, 5, 5)
    return bank


@dataclass
class SrmBank:
    """30 high-pass 5x5 filters, max-abs normalized to 1."""
    kernels: np.ndarray
    trainable: bool = True


def srm_bank_init() -> SrmBank:
    """Build the normalized 30-filter bank."""
    ik = srm_bank_integer()
    scale = np.abs(ik).max(axis=(1, 2)).astype(np.float64)
    return SrmBank(kernels=ik.astype(np.float64) / scale[:, None, None])


@dataclass
class PreprocessConfig:
    """Truncation threshold and the filter-freezing ablation switch."""
    T: float = 3.0
    freeze_srm: bool = False

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("truncation threshold must be positive")


@dataclass
class PreprocessParams:
    """Trainable front-end state: filter weights/biases plus a BN layer."""
    weight: Tensor  # (30, 1, 5, 5)
    bias: Tensor    # (30,)
    bn: BnState
    cfg: PreprocessConfig = field(default_factory=PreprocessConfig)


def init_preprocess(cfg: PreprocessConfig | None = None) -> PreprocessParams:
    cfg = cfg or PreprocessConfig()
    bank = srm_bank_init()
    trainable = not cfg.freeze_srm
    weight = Tensor(bank.kernels[:, None, :, :], requires_grad=trainable)
    bias = Tensor(np.full(30, 0.2), requires_grad=trainable)
    return PreprocessParams(weight=weight, bias=bias, bn=BnState(30), cfg=cfg)


def extract_residuals(x: Tensor, p: PreprocessParams) -> Tensor:
    """Filter a pixel plane into 30 residual maps (stride 1, pad 2)."""
    return T.conv2d(x, p.weight, p.bias, stride=1, pad=2)


def tlu(x: Tensor, threshold: float) -> Tensor:
    """Truncated linear unit: clamp to [-T, T].

    The gradient is 1 on the closed interval [-T, T] and 0 outside.
    """
    if threshold <= 0:
        raise ValueError("truncation threshold must be positive")
    xd = x.data
    out = np.clip(xd, -threshold, threshold)

    def bwd(g):
        return [(x, g * (np.abs(xd) <= threshold))]

    return T._emit(out, (x,), bwd)


def preprocess_forward(x: Tensor, p: PreprocessParams, training: bool) -> Tensor:
    """Residual extraction -> truncation -> batch normalization.

    `x` is a batch of pixel planes (N, 1, H, W); the result is (N, 30, H, W).
    """
    r = extract_residuals(x, p)
    r = tlu(r, p.cfg.T)
    return T.batch_norm(r, p.bn, training)
