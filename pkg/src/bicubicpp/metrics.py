"""Image quality metrics, the bicubic reference resampler, and the
challenge score.

Conventions, chosen once so the bicubic baseline is reproducible:
  * bicubic kernel sharpness a = -0.5 (Keys), half-pixel center alignment,
    edge-clamped borders;
  * luma is studio-swing BT.601: Y = (16 + 65.481 R + 128.553 G + 24.966 B)/255;
  * dataset evaluation shaves a `scale`-wide border (3 px) before PSNR.

All functions operate on the trailing two axes, so (H, W), (C, H, W) and
(N, C, H, W) arrays all work where the contract allows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RangeError, ShapeError

#: border (in pixels) cropped from both images during dataset evaluation
EVAL_SHAVE = 3

#: real-time compliance bound on runtime, milliseconds
RUNTIME_LIMIT_MS = 30.0


def bicubic_kernel(x, a: float = -0.5):
    """Keys piecewise-cubic interpolation kernel, evaluated elementwise.

    (a+2)|x|^3 - (a+3)|x|^2 + 1 on |x| <= 1,
    a|x|^3 - 5a|x|^2 + 8a|x| - 4a on 1 < |x| < 2, else 0.
    """
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    far = ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resample_axis(img: np.ndarray, out_size: int, axis: int, a: float) -> np.ndarray:
    in_size = img.shape[axis]
    scale = out_size / in_size
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    taps = base[:, None] + np.arange(-1, 3)[None, :]  # (out, 4)
    weights = bicubic_kernel(src[:, None] - taps, a)
    taps = np.clip(taps, 0, in_size - 1)

    moved = np.moveaxis(img, axis, -1)
    gathered = moved[..., taps]  # (..., out, 4)
    out = np.einsum("...ot,ot->...o", gathered, weights)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, a: float = -0.5) -> np.ndarray:
    """Separable 4-tap bicubic resampling of the trailing two axes.

    Half-pixel center alignment (src = (dst + 0.5)/scale - 0.5) with
    edge-clamped borders; the result is clamped to [0, 1].
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output dims ({out_h}, {out_w}) must be positive")
    if img.ndim < 2:
        raise ShapeError("image must have at least 2 dims")
    out = _resample_axis(img.astype(np.float64, copy=False), out_h, img.ndim - 2, a)
    out = _resample_axis(out, out_w, img.ndim - 1, a)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def bicubic_upscale_x3(img: np.ndarray) -> np.ndarray:
    """The challenge baseline: x3 bicubic upscaling."""
    return bicubic_resize(img, img.shape[-2] * 3, img.shape[-1] * 3)


_Y_COEFFS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: np.ndarray, convention: str = "studio") -> np.ndarray:
    """Luma plane of an RGB image in [0, 1]; channel axis is axis -3.

    "studio" is BT.601 studio swing (black 16/255, white 235/255); "full"
    uses the same weights normalized to [0, 1] with no offset.
    """
    if img.ndim < 3 or img.shape[-3] != 3:
        raise ShapeError(f"expected 3 channels on axis -3, got shape {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    if convention == "studio":
        y = (16.0 + _Y_COEFFS[0] * r + _Y_COEFFS[1] * g + _Y_COEFFS[2] * b) / 255.0
    elif convention == "full":
        y = (_Y_COEFFS[0] * r + _Y_COEFFS[1] * g + _Y_COEFFS[2] * b) / _Y_COEFFS.sum()
    else:
        raise RangeError(f"unknown Y convention {convention!r}")
    return y[..., None, :, :]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, shave: int = 0) -> float:
    """10 log10(peak^2 / MSE) over the border-cropped region; inf when a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2], a.shape[-1]
    if shave and shave >= min(h, w) / 2:
        raise RangeError(f"shave {shave} leaves no pixels for {h}x{w}")
    if shave:
        a = a[..., shave:-shave, shave:-shave]
        b = b[..., shave:-shave, shave:-shave]
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of the trailing two axes with g x g."""
    k = g.size
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2)
    img = np.einsum("...k,k->...", win, g)  # shrinks axis -2 in place
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1)
    return np.einsum("...k,k->...", win, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Inputs are single-channel (a size-1 channel axis is accepted) with unit
    peak; C1 = 0.01^2, C2 = 0.03^2.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim >= 3 and a.shape[-3] == 1:
        a, b = a[..., 0, :, :], b[..., 0, :, :]
    if a.ndim < 2 or min(a.shape[-2], a.shape[-1]) < 11:
        raise ShapeError(f"dims {a.shape} smaller than the 11x11 window")

    g = _gaussian_window()
    c1, c2 = 0.01**2, 0.03**2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ScoreInputs:
    """PSNR of the network, PSNR of bicubic upsampling, runtime in ms."""

    P: float
    P_bic: float
    t: float


@dataclass
class ScoreResult:
    value: float
    runtime_compliant: bool


def score(s: ScoreInputs) -> ScoreResult:
    """Challenge score: 0 if P <= P_bic, else 2^(P - P_bic) * 2 / (0.1 sqrt(t)).

    runtime_compliant flags t < 30 ms; it does not zero the score.
    """
    if s.t <= 0:
        raise RangeError(f"runtime must be positive, got {s.t}")
    compliant = s.t < RUNTIME_LIMIT_MS
    if s.P <= s.P_bic:
        return ScoreResult(0.0, compliant)
    value = (2.0 ** (s.P - s.P_bic)) * 2.0 / (0.1 * math.sqrt(s.t))
    return ScoreResult(value, compliant)


@dataclass
class ScoreReport:
    """Quality/latency bundle for one model on one dataset."""

    psnr_y: float
    psnr_rgb: float
    ssim: float
    runtime_ms: float
    runtime_p10_ms: float
    runtime_p90_ms: float
    psnr_y_bicubic: float
    score: float
    runtime_compliant: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def dataset_psnr_y(model, pairs, batch: int = 8, shave: int = EVAL_SHAVE) -> float:
    """Mean per-image PSNR(Y) of a model over (lr, hr) pairs.

    Pairs with identical dims are batched (the validation protocol keeps all
    dims equal so a batch of 8 applies); the mean is over images either way.
    """
    values: list[float] = []
    i = 0
    pairs = list(pairs)
    while i < len(pairs):
        j = i + 1
        while (
            j < len(pairs)
            and j - i < batch
            and pairs[j].lr.shape == pairs[i].lr.shape
        ):
            j += 1
        lr = np.stack([p.lr for p in pairs[i:j]])
        hr = np.stack([p.hr for p in pairs[i:j]])
        out = model.forward(lr)
        ys, yh = rgb_to_y(out), rgb_to_y(hr)
        for n in range(out.shape[0]):
            values.append(psnr(ys[n], yh[n], shave=shave))
        i = j
    return float(np.mean(values))
