"""JPEG luminance-coefficient model: blockwise 8x8 DCT, quality-factor
quantization tables, decompression to real-valued pixel planes, a toy
plus/minus-one coefficient embedder, synthetic cover generation, and the
SGDS dataset container.

Coefficient grids hold quantized integer DCT coefficients in a
(blocks_y, blocks_x, 8, 8) layout; pixel planes are plain (h, w) float
arrays, never rounded or clamped on decompression.
"""

from __future__ import annotations

from dataclasses import dataclass
import struct

import numpy as np
from scipy.ndimage import gaussian_filter

from .util import atomic_write_bytes


class FormatError(ValueError):
    """Raised when a serialized container fails validation."""


# Annex-K luminance base quantization table
_BASE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


@dataclass(frozen=True)
class QuantTable:
    """8x8 table of quantization steps, shared by every block of an image."""
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.int64)
        if q.shape != (8, 8):
            raise ValueError("quantization table must be 8x8")
        if q.min() < 1 or q.max() > 255:
            raise ValueError("quantization steps must lie in [1, 255]")
        object.__setattr__(self, "q", q)

    def __eq__(self, other):
        return isinstance(other, QuantTable) and np.array_equal(self.q, other.q)


def quant_table(qf: int) -> QuantTable:
    """Luminance table for a quality factor in [1, 100] (IJG scaling rule)."""
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    q = (_BASE_TABLE * scale + 50) // 100
    return QuantTable(np.clip(q, 1, 255))


@dataclass
class CoefficientGrid:
    """Quantized DCT coefficients of one image, blockwise 8x8 layout."""
    h: int
    w: int
    coeffs: np.ndarray  # (h//8, w//8, 8, 8) integers
    table: QuantTable

    def __post_init__(self):
        if self.h % 8 or self.w % 8 or self.h <= 0 or self.w <= 0:
            raise ValueError("image dims must be positive multiples of 8")
        c = np.asarray(self.coeffs)
        if not np.issubdtype(c.dtype, np.integer):
            raise ValueError("coefficients must be integers")
        expect = (self.h // 8, self.w // 8, 8, 8)
        if c.shape != expect:
            raise ValueError(f"coefficient array must have shape {expect}, got {c.shape}")
        self.coeffs = c.astype(np.int32, copy=False)

    def copy(self) -> "CoefficientGrid":
        return CoefficientGrid(self.h, self.w, self.coeffs.copy(), self.table)


@dataclass(frozen=True)
class StegoPair:
    """A cover grid with its embedded twin; they differ only at nonzero-AC
    positions, each by exactly +-1. rate/seed record how the pair was made
    and are unknown (None) for pairs read back from disk."""
    cover: CoefficientGrid
    stego: CoefficientGrid
    rate: float | None = None
    seed: int | None = None


# ---------------------------------------------------------------------------
# blockwise DCT

def _dct_matrix(dtype=np.float64) -> np.ndarray:
    # M[u, x] = (1/2) g_u cos((2x+1) u pi / 16), g_0 = 1/sqrt(2), else 1;
    # orthonormal, so the inverse transform is the transpose
    u = np.arange(8).reshape(8, 1)
    x = np.arange(8).reshape(1, 8)
    m = 0.5 * np.cos((2 * x + 1) * u * np.pi / 16)
    m[0] /= np.sqrt(2)
    return m.astype(dtype)


_DCT_M = _dct_matrix()


def block_dct(f: np.ndarray) -> np.ndarray:
    """Forward 8x8 DCT of one block or a (..., 8, 8) stack of blocks."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-2:] != (8, 8):
        raise ValueError("blocks must be 8x8")
    return _DCT_M @ f @ _DCT_M.T


def block_idct(d: np.ndarray) -> np.ndarray:
    """Inverse 8x8 DCT of one block or a (..., 8, 8) stack of blocks."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-2:] != (8, 8):
        raise ValueError("blocks must be 8x8")
    return _DCT_M.T @ d @ _DCT_M


def _blocks_to_plane(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.transpose(0, 2, 1, 3).reshape(h, w)


def _plane_to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def decompress(g: CoefficientGrid) -> np.ndarray:
    """Dequantize and inverse-transform a grid into an (h, w) float plane.

    The result is real-valued: no rounding, no clamping.
    """
    d = g.coeffs.astype(np.float64) * g.table.q.astype(np.float64)
    return _blocks_to_plane(block_idct(d), g.h, g.w)


def compress(plane: np.ndarray, table: QuantTable) -> CoefficientGrid:
    """Blockwise DCT, divide by the table, round half away from zero."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] % 8 or plane.shape[1] % 8:
        raise ValueError("plane dims must be multiples of 8")
    h, w = plane.shape
    d = block_dct(_plane_to_blocks(plane))
    ratio = d / table.q.astype(np.float64)
    c = np.copysign(np.floor(np.abs(ratio) + 0.5), ratio).astype(np.int32)
    return CoefficientGrid(h, w, c, table)


# ---------------------------------------------------------------------------
# payload accounting and the toy embedder

_AC_MASK = np.ones((8, 8), dtype=bool)
_AC_MASK[0, 0] = False


def count_nzac(g: CoefficientGrid) -> int:
    """Number of nonzero AC coefficients over all blocks."""
    return int(((g.coeffs != 0) & _AC_MASK).sum())


def embed_toy(g: CoefficientGrid, rate: float, rng: np.random.Generator) -> CoefficientGrid:
    """Simulate embedding at `rate` bits per nonzero AC coefficient.

    round(0.5 * rate * nzAC) distinct nonzero-AC positions are picked
    uniformly and changed by +-1 with equal probability; a change that would
    zero a coefficient is flipped so nzAC stays constant. This mirrors the
    expected change rate of LSB matching at the given payload; it is an
    approximation, not a real embedding algorithm. The cover is not mutated.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    out = g.copy()
    positions = np.argwhere((g.coeffs != 0) & _AC_MASK)
    n_changes = int(round(0.5 * rate * len(positions)))
    if n_changes == 0:
        return out
    chosen = rng.choice(len(positions), size=n_changes, replace=False)
    signs = rng.integers(0, 2, size=n_changes) * 2 - 1
    for (by, bx, i, j), s in zip(positions[chosen], signs):
        c = out.coeffs[by, bx, i, j]
        if c + s == 0:
            s = -s
        out.coeffs[by, bx, i, j] = c + s
    return out


# ---------------------------------------------------------------------------
# synthetic covers

def synth_cover(h: int, w: int, rng: np.random.Generator,
                smoothing: float = 1.5) -> np.ndarray:
    """Smoothed-noise pixel plane in [0, 255], deterministic given the rng.

    An iid uniform [0, 255] field is blurred with a normalized Gaussian
    (sigma = smoothing, truncated at 2 sigma), then iid zero-mean noise with
    std 2 is added and the result clamped to [0, 255].
    """
    if h % 8 or w % 8 or h <= 0 or w <= 0:
        raise ValueError("cover dims must be positive multiples of 8")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    field = rng.uniform(0.0, 255.0, size=(h, w))
    smooth = gaussian_filter(field, sigma=smoothing, truncate=2.0, mode="reflect")
    noisy = smooth + rng.normal(0.0, 2.0, size=(h, w))
    return np.clip(noisy, 0.0, 255.0)


# ---------------------------------------------------------------------------
# SGDS dataset container

_SGDS_MAGIC = b"SGDS"
_SGDS_VERSION = 1


def write_dataset(path: str, pairs: list[StegoPair]) -> None:
    """Serialize cover/stego pairs (little-endian SGDS, version 1)."""
    if not pairs:
        raise ValueError("dataset must contain at least one pair")
    first = pairs[0]
    h, w, table = first.cover.h, first.cover.w, first.cover.table
    buf = bytearray()
    buf += _SGDS_MAGIC
    buf += struct.pack("<IIHH", _SGDS_VERSION, len(pairs), h, w)
    buf += table.q.astype("<u2").tobytes()
    for p in pairs:
        if (p.cover.h, p.cover.w) != (h, w) or p.cover.table != table:
            raise ValueError("all pairs must share dims and quantization table")
        for grid in (p.cover, p.stego):
            c = grid.coeffs
            if c.min() < -32768 or c.max() > 32767:
                raise ValueError("coefficients out of i16 range")
            buf += c.astype("<i2").tobytes()
        buf += b"\x00"
    atomic_write_bytes(path, bytes(buf))


def read_dataset(path: str) -> list[StegoPair]:
    """Parse an SGDS file; rejects unknown magic/version and truncation."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _SGDS_MAGIC:
        raise FormatError(f"{path}: not an SGDS dataset (bad magic)")
    version, pair_count, h, w = struct.unpack("<IIHH", raw[4:16])
    if version != _SGDS_VERSION:
        raise FormatError(f"{path}: unsupported SGDS version {version}")
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise FormatError(f"{path}: invalid dims {h}x{w}")
    off = 16
    if len(raw) < off + 128:
        raise FormatError(f"{path}: truncated header")
    table = QuantTable(np.frombuffer(raw[off:off + 128], dtype="<u2").reshape(8, 8))
    off += 128
    per_grid = (h // 8) * (w // 8) * 64 * 2
    expect = off + pair_count * (2 * per_grid + 1)
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(raw)}")
    pairs = []
    for _ in range(pair_count):
        grids = []
        for _ in range(2):
            c = np.frombuffer(raw[off:off + per_grid], dtype="<i2")
            grids.append(CoefficientGrid(
                h, w, c.reshape(h // 8, w // 8, 8, 8).astype(np.int32), table))
            off += per_grid
        off += 1  # reserved byte
        pairs.append(StegoPair(grids[0], grids[1]))
    return pairs
