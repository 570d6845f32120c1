"""Rank-4 tensor primitives: direct 2-D convolution and elementwise fusion ops.

Activations live in numpy arrays laid out channel-last, shape ``(n, h, w, c)``
(batch, rows, cols, channels), C-contiguous.  Channel statistics use shape
``(n, c)``.  Every function here is pure: inputs are never mutated and the
same inputs produce bit-identical outputs (accumulation order is fixed).

Precision follows the inputs: feed float64 arrays for checking work, float32
for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Aliases used in signatures for readability; both are plain numpy arrays.
Tensor4 = np.ndarray  # (n, h, w, c)
ChannelVec = np.ndarray  # (n, c)


class ShapeError(ValueError):
    """Operand dimensions do not satisfy an op's contract."""


class UnsupportedConfigError(ValueError):
    """Structurally valid input that the op refuses (e.g. even kernel size)."""


class NonFiniteError(FloatingPointError):
    """An op produced inf/nan while debug checks were enabled."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness validation (off by default; costs a scan)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _finite_guard(out: np.ndarray, op: str) -> np.ndarray:
    if _debug_checks and not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must have rank 4 (n,h,w,c), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def check_channel_vec(x: np.ndarray, name: str = "vector") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"{name} must have rank 2 (n,c), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass(frozen=True)
class ConvKernel:
    """Spatial convolution weights with their sampling geometry.

    ``weights`` has shape (kh, kw, c_in, c_out).  ``dilation`` spaces the
    taps; a 3x3 kernel with dilation 2 covers a 5x5 extent at 3x3 cost.
    Spatial kernels carry no bias.
    """

    weights: np.ndarray
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ShapeError(f"kernel weights must be (kh,kw,c_in,c_out), got {w.shape}")
        if min(w.shape) < 1:
            raise ShapeError(f"kernel has an empty dimension: {w.shape}")
        if self.dilation < 1 or self.stride < 1:
            raise UnsupportedConfigError(
                f"dilation and stride must be >= 1, got {self.dilation}, {self.stride}"
            )
        object.__setattr__(self, "weights", w)

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[3]

    @property
    def effective_extent(self) -> int:
        """Spatial footprint after dilation: dilation*(k-1)+1."""
        return self.dilation * (self.kh - 1) + 1

    @property
    def param_count(self) -> int:
        return int(self.weights.size)


def same_pad(k: int, dilation: int) -> int:
    """Per-side zero padding that preserves spatial size at stride 1.

    Only odd kernel sizes admit symmetric same-padding; even sizes are
    rejected.
    """
    if k % 2 == 0:
        raise UnsupportedConfigError(f"even kernel size {k} is not supported")
    return dilation * (k - 1) // 2


def conv_out_len(size: int, stride: int) -> int:
    """Output length along one spatial axis: ceil(size / stride)."""
    return -(-size // stride)


def conv2d_raw(
    x: Tensor4, weights: np.ndarray, dilation: int = 1, stride: int = 1
) -> Tensor4:
    """Direct 2-D convolution with same zero padding and dilated taps.

    Output shape is (n, ceil(h/stride), ceil(w/stride), c_out); taps falling
    outside the input read zero.  Accumulation runs over taps in row-major
    (ky, kx) order, with the channel reduction done per tap, so results are
    deterministic for fixed inputs.
    """
    x = check_tensor4(x, "conv input")
    weights = np.asarray(weights)
    if weights.ndim != 4:
        raise ShapeError(f"kernel weights must be (kh,kw,c_in,c_out), got {weights.shape}")
    kh, kw, c_in, c_out = weights.shape
    n, h, w, c = x.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but kernel expects {c_in}")
    if dilation < 1 or stride < 1:
        raise UnsupportedConfigError(
            f"dilation and stride must be >= 1, got {dilation}, {stride}"
        )
    ph = same_pad(kh, dilation)
    pw = same_pad(kw, dilation)
    oh = conv_out_len(h, stride)
    ow = conv_out_len(w, stride)

    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, oh, ow, c_out), dtype=np.result_type(x, weights))
    for ky in range(kh):
        y0 = ky * dilation
        ys = slice(y0, y0 + (oh - 1) * stride + 1, stride)
        for kx in range(kw):
            x0 = kx * dilation
            xs = slice(x0, x0 + (ow - 1) * stride + 1, stride)
            out += xp[:, ys, xs, :] @ weights[ky, kx]
    return _finite_guard(out, "conv2d")


def conv2d(x: Tensor4, k: ConvKernel) -> Tensor4:
    return conv2d_raw(x, k.weights, k.dilation, k.stride)


def _check_same_shape(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op} requires identical shapes, got {x.shape} vs {y.shape}")


def ew_mul(x: Tensor4, y: Tensor4) -> Tensor4:
    """Elementwise product.  Amplifies positions where both operands respond."""
    x, y = np.asarray(x), np.asarray(y)
    _check_same_shape(x, y, "ew_mul")
    return _finite_guard(x * y, "ew_mul")


def ew_sub(x: Tensor4, y: Tensor4) -> Tensor4:
    """Elementwise difference x - y.  Cancels content shared by both operands."""
    x, y = np.asarray(x), np.asarray(y)
    _check_same_shape(x, y, "ew_sub")
    return _finite_guard(x - y, "ew_sub")


def ew_add(x: Tensor4, y: Tensor4) -> Tensor4:
    x, y = np.asarray(x), np.asarray(y)
    _check_same_shape(x, y, "ew_add")
    return _finite_guard(x + y, "ew_add")


def global_avg_pool(x: Tensor4) -> ChannelVec:
    """Mean over all spatial positions, per sample and channel: (n,h,w,c) -> (n,c)."""
    x = check_tensor4(x, "pool input")
    return _finite_guard(x.mean(axis=(1, 2)), "global_avg_pool")


def fc(x: ChannelVec, weights: np.ndarray, bias: np.ndarray) -> ChannelVec:
    """Affine map per sample: x @ weights + bias, (n,c_in) -> (n,c_out)."""
    x = check_channel_vec(x, "fc input")
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"fc weights must be ({x.shape[1]}, c_out), got {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"fc bias must be ({weights.shape[1]},), got {bias.shape}")
    return _finite_guard(x @ weights + bias, "fc")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated branch-wise so neither tail overflows."""
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_pair(a_hat: ChannelVec, b_hat: ChannelVec) -> tuple[ChannelVec, ChannelVec]:
    """Two-way softmax weights (a, b) with a + b = 1.

    a = exp(a_hat) / (exp(a_hat) + exp(b_hat)) evaluated in the shifted form,
    which is term-for-term the same arithmetic as sigmoid(a_hat - b_hat); b is
    returned as 1 - a so the pair sums to one to the last ulp.
    """
    a_hat, b_hat = np.asarray(a_hat), np.asarray(b_hat)
    _check_same_shape(a_hat, b_hat, "softmax_pair")
    a = sigmoid(a_hat - b_hat)
    return a, 1.0 - a
