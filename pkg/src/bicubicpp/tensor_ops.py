"""Dense NCHW tensor operators plus the Adam/learning-rate training math.

Tensors are plain numpy arrays laid out (N, C, H, W) row-major. Every
function here is pure: arrays go in, new arrays come out, optimizer state is
returned rather than mutated. float32 is the working precision for training
and inference; all operators equally accept float64, which the numeric test
suite relies on.

Convolution follows the deep-learning convention (cross-correlation, no
kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, RangeError, ShapeError


@dataclass
class ConvParams:
    """One convolutional layer: OIHW weights, optional bias, stride, padding."""

    weight: np.ndarray  # (Cout, Cin, k, k), k odd
    bias: np.ndarray | None = None  # (Cout,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"weights must be (Cout, Cin, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {w.shape[2]}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match Cout={w.shape[0]}"
            )
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def copy(self) -> "ConvParams":
        return ConvParams(
            self.weight.copy(),
            None if self.bias is None else self.bias.copy(),
            self.stride,
            self.padding,
        )


def _out_dim(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(
            f"conv output dim for size={size}, k={k}, stride={stride}, "
            f"padding={padding} is not positive"
        )
    return span // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """All k-by-k input windows of x as a view, shape (N, C, Ho, Wo, k, k)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Zero-padded strided cross-correlation plus bias broadcast.

    x is (N, Cin, H, W); the result is (N, Cout, H', W') with
    H' = floor((H + 2*padding - k)/stride) + 1, which must be positive.
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    cout, cin, k, _ = p.weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weights expect {cin}")
    ho = _out_dim(h, k, p.stride, p.padding)
    wo = _out_dim(w, k, p.stride, p.padding)

    win = _windows(x, k, p.stride, p.padding)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    y = cols @ p.weight.reshape(cout, -1).T
    if p.bias is not None:
        y = y + p.bias
    return np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, p: ConvParams, grad_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of sum(grad_y * conv2d_forward(x, p)) w.r.t. x, weight, bias.

    grad_b is None when the layer has no bias.
    """
    n, c, h, w = x.shape
    cout, cin, k, _ = p.weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weights expect {cin}")
    ho = _out_dim(h, k, p.stride, p.padding)
    wo = _out_dim(w, k, p.stride, p.padding)
    if grad_y.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"grad_y shape {grad_y.shape} does not match output {(n, cout, ho, wo)}"
        )

    win = _windows(x, k, p.stride, p.padding)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    g = grad_y.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)

    grad_w = (g.T @ cols).reshape(p.weight.shape)
    grad_b = grad_y.sum(axis=(0, 2, 3)) if p.bias is not None else None

    # Scatter-add window gradients back onto the (padded) input plane.
    grad_cols = (g @ p.weight.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    grad_cols = grad_cols.transpose(0, 3, 1, 2, 4, 5)
    pad = p.padding
    grad_xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    s = p.stride
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += grad_cols[
                ..., i, j
            ]
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def activation(x: np.ndarray, kind: str, slope: float = 0.1) -> np.ndarray:
    """Elementwise ReLU or leaky ReLU with the given negative slope."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, x * x.dtype.type(slope))
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_grad(x: np.ndarray, kind: str, slope: float = 0.1) -> np.ndarray:
    """Elementwise derivative of `activation`; the kink at 0 takes slope 1."""
    one = x.dtype.type(1)
    if kind == "relu":
        return np.where(x >= 0, one, x.dtype.type(0))
    if kind == "leaky_relu":
        return np.where(x >= 0, one, x.dtype.type(slope))
    raise ConfigError(f"unknown activation kind {kind!r}")


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (N, C*r^2, H, W) -> (N, C, H*r, W*r).

    out[n, c, h*r+i, w*r+j] = in[n, c*r^2 + i*r + j, h, w].
    """
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * r, w * r))


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of `depth_to_space`: (N, C, H, W) -> (N, C*r^2, H/r, W/r)."""
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"spatial dims ({h}, {w}) not divisible by r={r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def haar_dwt_down(x: np.ndarray) -> np.ndarray:
    """One orthonormal Haar analysis level: (N, C, H, W) -> (N, 4C, H/2, W/2).

    Each input channel c yields subbands [LL, LH, HL, HH] at output channels
    4c..4c+3. Per 2x2 block (a, b; c, d):

        LL = (a+b+c+d)/2   LH = (a-b+c-d)/2
        HL = (a+b-c-d)/2   HH = (a-b-c+d)/2

    The transform preserves the L2 norm.
    """
    n, c, h, w = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ShapeError(f"spatial dims ({h}, {w}) must be even")
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    half = x.dtype.type(0.5)
    out = np.empty((n, 4 * c, h // 2, w // 2), dtype=x.dtype)
    out[:, 0::4] = (a + b + cc + d) * half
    out[:, 1::4] = (a - b + cc - d) * half
    out[:, 2::4] = (a + b - cc - d) * half
    out[:, 3::4] = (a - b - cc + d) * half
    return out


@dataclass
class AdamState:
    """Per-parameter Adam accumulators."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, param: np.ndarray) -> "AdamState":
        return cls(0, np.zeros_like(param), np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.99,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns (new_param, new_state)."""
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite values")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param.astype(param.dtype, copy=False), AdamState(t, m, v)


@dataclass
class LrSchedule:
    """Constant learning rate, then linear decay to lr_final on the last epoch."""

    lr0: float = 5e-4
    total_epochs: int = 1000
    constant_epochs: int = 500
    lr_final: float = 1e-8

    def __post_init__(self):
        if self.constant_epochs > self.total_epochs:
            raise ConfigError("constant_epochs must be <= total_epochs")
        if self.lr_final > self.lr0:
            raise ConfigError("lr_final must be <= lr0")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")


def lr_at(epoch: int, s: LrSchedule) -> float:
    """Learning rate for a zero-based epoch index."""
    if not 0 <= epoch < s.total_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.constant_epochs:
        return s.lr0
    last = s.total_epochs - 1
    span = last - s.constant_epochs
    if span <= 0:
        return s.lr_final
    frac = (epoch - s.constant_epochs) / span
    # two-sided form hits lr_final exactly at the last epoch
    return s.lr0 * (1.0 - frac) + s.lr_final * frac
