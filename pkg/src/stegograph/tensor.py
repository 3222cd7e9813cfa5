"""Minimal deterministic tensor library with reverse-mode automatic differentiation.

Every primitive the detector needs lives here: convolution, pooling, batch
normalization, dense layers, activations, channel concatenation, softmax
cross-entropy, plus the elementwise/reshaping glue used to compose them.
Each operation has a hand-written backward rule recorded on an explicit
tape (`Tape`); `Tape.backward` replays the tape in reverse exactly once.

Two global precisions are supported: "standard" (float32, training) and
"wide" (float64, gradient checking). Precision is a run mode, not a
per-tensor property. Non-finite values abort immediately instead of
propagating.
"""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# precision mode

_PRECISIONS = {"standard": np.float32, "wide": np.float64}
_precision = "standard"


def set_precision(mode: str) -> None:
    """Switch the global numeric precision ("standard" = f32, "wide" = f64)."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected 'standard' or 'wide'")
    global _precision
    _precision = mode


def get_precision() -> str:
    return _precision


def float_dtype():
    return _PRECISIONS[_precision]


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """N-dimensional real array, optionally tracked for gradients.

    Data is immutable by convention after creation; only the optimizer
    rewrites `.data` (between tapes) and only `backward` populates `.grad`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=float_dtype())
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal: wrap an op result without copying; cheap finiteness probe
        # (sum is NaN/Inf whenever any element is)
        if not np.isfinite(np.sum(arr)):
            raise ValueError("operation produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications; one reverse sweep per tape.

    Used as a context manager: ops executed inside the `with` block are
    recorded in execution order (a valid topological order), then
    `backward(loss)` walks the records once in reverse.
    """

    def __init__(self):
        self._records = []  # (output Tensor, backward_fn(grad) -> [(input, grad), ...])
        self._consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
        if self._consumed:
            raise RuntimeError("tape already consumed by backward; re-record the graph")
        if loss.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones((), dtype=loss.data.dtype))
        }
        seeded = False
        for out, backward_fn in reversed(self._records):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            seeded = True
            g = entry[1]
            if not np.isfinite(np.sum(g)):
                raise ValueError("non-finite gradient encountered during backward")
            if out.requires_grad and out.grad is None:
                out.grad = g
            for inp, gi in backward_fn(g):
                key = id(inp)
                cur = grads.get(key)
                if cur is None:
                    grads[key] = (inp, gi)
                else:
                    grads[key] = (inp, cur[1] + gi)
        if not seeded and self._records:
            raise ValueError("loss was not recorded on this tape")
        for t, g in grads.values():
            if t.requires_grad:
                t.grad = np.ascontiguousarray(g)


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _emit(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result and record it when a tape is active and needed."""
    rg = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = _active_tape()
    out = Tensor._wrap(out_data, rg and tape is not None)
    if tape is not None and rg:
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float_dtype()))


# ---------------------------------------------------------------------------
# elementwise / structural primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _emit(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape))]

    return _emit(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        c = float(b)

        def bwd_scaled(g):
            return [(a, g * c)]

        return _emit(a.data * c, (a,), bwd_scaled)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape))]

    return _emit(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return [(a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape))]

    return _emit(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return [(x, g.reshape(old))]

    return _emit(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return [(x, np.ascontiguousarray(g.transpose(inv)))]

    return _emit(out, (x,), bwd)


def slice1d(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 1:
        raise ValueError("slice1d expects a 1-D tensor")
    out = x.data[start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return [(x, gx)]

    return _emit(out, (x,), bwd)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.data.shape).copy())]
        gx = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gx, x.data.shape).copy())]

    return _emit(np.asarray(out), (x,), bwd)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


def repeat_channels(x: Tensor, channels: int) -> Tensor:
    """Tile an (N,H,W) map into (N,channels,H,W); backward sums the copies."""
    if x.ndim != 3:
        raise ValueError("repeat_channels expects an (N,H,W) tensor")
    out = np.ascontiguousarray(
        np.broadcast_to(x.data[:, None, :, :], (x.shape[0], channels) + x.shape[1:])
    )

    def bwd(g):
        return [(x, g.sum(axis=1))]

    return _emit(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis, `a` first; 3-D (C,H,W) or 4-D (N,C,H,W)."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ValueError("concat_channels expects two 3-D or two 4-D tensors")
    axis = 0 if a.ndim == 3 else 1
    if a.data.shape[axis + 1:] != b.data.shape[axis + 1:] or \
            a.data.shape[:axis] != b.data.shape[:axis]:
        raise ValueError(f"spatial/batch mismatch: {a.shape} vs {b.shape}")
    c1 = a.data.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def bwd(g):
        ga, gb = np.split(g, [c1], axis=axis)
        return [(a, np.ascontiguousarray(ga)), (b, np.ascontiguousarray(gb))]

    return _emit(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations

def activation(x: Tensor, mode: str) -> Tensor:
    """Elementwise nonlinearity: relu, leaky_relu (slope 0.2) or elu."""
    xd = x.data
    if mode == "relu":
        out = np.maximum(xd, 0)

        def bwd(g):
            return [(x, g * (xd > 0))]
    elif mode == "leaky_relu":
        out = np.where(xd > 0, xd, 0.2 * xd)

        def bwd(g):
            return [(x, g * np.where(xd > 0, 1.0, 0.2).astype(xd.dtype))]
    elif mode == "elu":
        out = np.where(xd > 0, xd, np.expm1(np.minimum(xd, 0)))

        def bwd(g):
            # d/dx elu = 1 for x > 0, e^x = elu(x)+1 otherwise
            return [(x, g * np.where(xd > 0, 1.0, out + 1.0).astype(xd.dtype))]
    else:
        raise ValueError(f"unknown activation mode {mode!r}")
    return _emit(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


# ---------------------------------------------------------------------------
# convolution

def _check_conv_pre(H, W, kh, kw, stride, pad):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel dims must be odd")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ValueError("input smaller than kernel after padding")


def _tap_ranges(n_in: int, n_out: int, tap: int, stride: int, pad: int):
    """Output range [o0, o1) whose source index o*stride + tap - pad stays in
    bounds, plus the first source index."""
    lo = pad - tap
    o0 = 0 if lo <= 0 else -(-lo // stride)
    o1 = min(n_out, (n_in - 1 - tap + pad) // stride + 1)
    return o0, o1, o0 * stride + tap - pad


def _im2col(x_cnhw: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patch matrix in (C*kh*kw, N*OH*OW) layout from a (C,N,H,W) array.

    Zero padding is implicit: out-of-bounds taps stay at the zero fill of the
    freshly allocated buffer instead of touching a padded copy of the input.
    """
    C, N, H, W = x_cnhw.shape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    alloc = np.zeros if pad else np.empty
    cols = alloc((C, kh, kw, N, OH, OW), dtype=x_cnhw.dtype)
    for i in range(kh):
        oy0, oy1, y0 = _tap_ranges(H, OH, i, stride, pad)
        for j in range(kw):
            ox0, ox1, x0 = _tap_ranges(W, OW, j, stride, pad)
            cols[:, i, j, :, oy0:oy1, ox0:ox1] = \
                x_cnhw[:, :, y0:y0 + (oy1 - oy0) * stride:stride,
                       x0:x0 + (ox1 - ox0) * stride:stride]
    return cols.reshape(C * kh * kw, N * OH * OW), OH, OW


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, pad):
    """Adjoint of `_im2col`; returns a (C,N,H,W) array."""
    C, N, H, W = xshape
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    dc = dcols.reshape(C, kh, kw, N, OH, OW)
    dx = np.zeros((C, N, H, W), dtype=dcols.dtype)
    for i in range(kh):
        oy0, oy1, y0 = _tap_ranges(H, OH, i, stride, pad)
        for j in range(kw):
            ox0, ox1, x0 = _tap_ranges(W, OW, j, stride, pad)
            dx[:, :, y0:y0 + (oy1 - oy0) * stride:stride,
               x0:x0 + (ox1 - ox0) * stride:stride] += dc[:, i, j, :, oy0:oy1, ox0:ox1]
    return dx


def _pad_rows8(wf: np.ndarray) -> np.ndarray:
    # single-thread BLAS runs the ragged-N gemm kernels ~1.7x slower; pad the
    # output-channel dim to a multiple of 8 and slice the result
    co = wf.shape[0]
    cop = -(-co // 8) * 8
    if cop == co:
        return wf
    wfp = np.zeros((cop, wf.shape[1]), dtype=wf.dtype)
    wfp[:co] = wf
    return wfp


# im2col patch matrices below this size are kept for the backward pass
_COLS_CACHE_BYTES = 48 * 1024 * 1024


def _conv_forward_data(xd: np.ndarray, wd: np.ndarray, stride: int, pad: int):
    """Cross-correlation on (N,C,H,W) data; returns (out, cols or None)."""
    N, C, H, W = xd.shape
    CO, _, kh, kw = wd.shape
    if kh == 1 and kw == 1:
        # pure channel mix: gemm on the (possibly strided) pixel grid
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        OH, OW = xs.shape[2], xs.shape[3]
        xm = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, C)
        wfp = _pad_rows8(wd.reshape(CO, C))
        outm = xm @ wfp.T
        out = np.ascontiguousarray(
            outm[:, :CO].reshape(N, OH, OW, CO).transpose(0, 3, 1, 2))
        return out, None
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
    colsf, OH, OW = _im2col(xt, kh, kw, stride, pad)
    wfp = _pad_rows8(wd.reshape(CO, C * kh * kw))
    outm = colsf.T @ wfp.T  # (N*OH*OW, CO_padded)
    out = np.ascontiguousarray(
        outm[:, :CO].reshape(N, OH, OW, CO).transpose(0, 3, 1, 2))
    keep = colsf if colsf.nbytes <= _COLS_CACHE_BYTES else None
    return out, keep


def _conv_backward_data(g: np.ndarray, xd: np.ndarray, wd: np.ndarray,
                        colsf, stride: int, pad: int):
    """Gradients (dx, dw) for `_conv_forward_data`."""
    N, C, H, W = xd.shape
    CO, _, kh, kw = wd.shape
    OH, OW = g.shape[2], g.shape[3]
    gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, CO)
    if kh == 1 and kw == 1:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        xm = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, C)
        dw = (gm.T @ xm).reshape(wd.shape)
        dxs = (gm @ wd.reshape(CO, C)).reshape(N, OH, OW, C).transpose(0, 3, 1, 2)
        if stride == 1:
            return np.ascontiguousarray(dxs), dw
        dx = np.zeros_like(xd)
        dx[:, :, ::stride, ::stride] = dxs
        return dx, dw
    if colsf is None:
        xt = np.ascontiguousarray(xd.transpose(1, 0, 2, 3))
        colsf, _, _ = _im2col(xt, kh, kw, stride, pad)
    dw = (gm.T @ colsf.T).reshape(wd.shape)
    if stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0:
        # dx is itself a cross-correlation of g with the flipped, i/o-swapped kernel
        wflip = np.ascontiguousarray(wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx, _ = _conv_forward_data(g, wflip, 1, kh - 1 - pad)
        return dx, dw
    dcols = wd.reshape(CO, -1).T @ gm.T
    dx = _col2im(dcols, (C, N, H, W), kh, kw, stride, pad).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    `x` is (C,H,W) or (N,C,H,W); `k` is (C_out,C_in,kh,kw); output spatial
    dims are floor((H+2*pad-kh)/stride)+1.
    """
    if k.ndim != 4:
        raise ValueError(f"kernel must be 4-D, got shape {k.shape}")
    if x.ndim == 3:
        out4 = conv2d(reshape(x, (1,) + x.shape), k, bias, stride, pad)
        return reshape(out4, out4.shape[1:])
    if x.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got shape {x.shape}")
    N, C, H, W = x.shape
    CO, CI, kh, kw = k.shape
    if CI != C:
        raise ValueError(f"kernel expects {CI} input channels, input has {C}")
    _check_conv_pre(H, W, kh, kw, stride, pad)
    if bias is not None and bias.shape != (CO,):
        raise ValueError(f"bias must have shape ({CO},), got {bias.shape}")
    out, colsf = _conv_forward_data(x.data, k.data, stride, pad)
    if bias is not None:
        out += bias.data[:, None, None]

    def bwd(g):
        dx, dw = _conv_backward_data(g, x.data, k.data, colsf, stride, pad)
        grads = [(x, dx), (k, dw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    inputs = (x, k) if bias is None else (x, k, bias)
    return _emit(out, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling

def avg_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """k x k mean pooling; the divisor is always k*k (padded zeros count)."""
    if x.ndim == 3:
        out4 = avg_pool2d(reshape(x, (1,) + x.shape), k, stride, pad)
        return reshape(out4, out4.shape[1:])
    if x.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got shape {x.shape}")
    N, C, H, W = x.shape
    _check_conv_pre(H, W, k, k, stride, pad)
    flat = x.data.reshape(1, N * C, H, W)
    colsf, OH, OW = _im2col(flat, k, k, stride, pad)
    out = colsf.reshape(k * k, N * C, OH, OW).mean(axis=0).reshape(N, C, OH, OW)
    inv = 1.0 / (k * k)

    def bwd(g):
        dcols = np.broadcast_to(g.reshape(1, -1) * inv, (k * k, N * C * OH * OW))
        dx = _col2im(dcols, (1, N * C, H, W), k, k, stride, pad)
        return [(x, np.ascontiguousarray(dx.reshape(N, C, H, W)))]

    return _emit(np.ascontiguousarray(out), (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (C,H,W) -> (C,) or (N,C,H,W) -> (N,C)."""
    if x.ndim == 3:
        out4 = global_avg_pool(reshape(x, (1,) + x.shape))
        return reshape(out4, out4.shape[1:])
    if x.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got shape {x.shape}")
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (H * W)

    def bwd(g):
        return [(x, np.broadcast_to(g[:, :, None, None] * inv, x.data.shape).copy())]

    return _emit(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization

class BnState:
    """Per-channel affine parameters plus EMA running statistics."""

    def __init__(self, channels: int, decay: float = 0.9, eps: float = 1e-5):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        dt = float_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.decay = decay
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(x: Tensor, s: BnState, training: bool) -> Tensor:
    """Normalize over all non-channel axes (channel axis = 1).

    Training mode uses batch statistics (biased variance) and updates the
    running stats via EMA: running = decay*running + (1-decay)*batch.
    Inference mode uses the running stats.
    """
    if x.ndim < 2:
        raise ValueError("batch_norm expects an (N,C,...) tensor")
    if x.shape[1] != s.channels:
        raise ValueError(f"state has {s.channels} channels, input has {x.shape[1]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, s.channels) + (1,) * (x.ndim - 2)
    gamma, beta = s.gamma, s.beta
    if training:
        if x.shape[0] < 2:
            raise ValueError("training-mode batch_norm needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        s.running_mean = (s.decay * s.running_mean + (1 - s.decay) * mean).astype(x.data.dtype)
        s.running_var = (s.decay * s.running_var + (1 - s.decay) * var).astype(x.data.dtype)
    else:
        mean = s.running_mean
        var = s.running_var
    inv = 1.0 / np.sqrt(var + s.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    nel = x.data.size // s.channels

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            # standard fused batch-norm input gradient
            t1 = dxhat.sum(axis=axes).reshape(bshape)
            t2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv.reshape(bshape) / nel) * (nel * dxhat - t1 - xhat * t2)
        else:
            dx = dxhat * inv.reshape(bshape)
        return [(x, dx.astype(x.data.dtype, copy=False)),
                (gamma, dgamma), (beta, dbeta)]

    return _emit(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# dense / softmax / loss

def dense(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected map W x (+ bias); x is (F,) or batched (N,F)."""
    if W.ndim != 2:
        raise ValueError("weight must be 2-D (out, in)")
    O, F = W.shape
    if x.shape[-1] != F:
        raise ValueError(f"weight expects {F} features, input has {x.shape[-1]}")
    if x.ndim == 1:
        out = W.data @ x.data
    elif x.ndim == 2:
        out = x.data @ W.data.T
    else:
        raise ValueError("input must be 1-D or 2-D")
    if bias is not None:
        if bias.shape != (O,):
            raise ValueError(f"bias must have shape ({O},), got {bias.shape}")
        out = out + bias.data

    def bwd(g):
        if x.ndim == 1:
            grads = [(x, W.data.T @ g), (W, np.outer(g, x.data))]
        else:
            grads = [(x, g @ W.data), (W, g.T @ x.data)]
        if bias is not None:
            grads.append((bias, g if x.ndim == 1 else g.sum(axis=0)))
        return grads

    inputs = (x, W) if bias is None else (x, W, bias)
    return _emit(out, inputs, bwd)


def softmax_last(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(x, y * (g - dot))]

    return _emit(y, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits), stable form."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be (N, classes)")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)
    p = np.exp(z - lse[:, None])

    def bwd(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return [(logits, d * (g / n))]

    return _emit(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = was
