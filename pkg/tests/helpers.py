"""Shared test oracles: independent reference implementations kept
deliberately naive so they stay independent of the library code paths."""

import numpy as np


def naive_conv2d(x, weight, bias=None, stride=1, padding=1):
    """Quadruple-loop cross-correlation; the reference for conv2d_forward."""
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    y = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += (
                                    xp[ni, ci, i * stride + u, j * stride + v]
                                    * weight[co, ci, u, v]
                                )
                    if bias is not None:
                        acc += bias[co]
                    y[ni, co, i, j] = acc
    return y


def central_diff(f, x, eps=1e-5):
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    """Scale-aware elementwise relative error, max over entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def synth_image(rng, h, w):
    """A structured RGB test image in [0, 1]: smooth waves plus hard edges.

    Enough low-frequency content that x3 super-resolution is learnable at
    desk scale, plus edges so it is not trivially bicubic-recoverable.
    """
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.zeros((3, h, w), dtype=np.float64)
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(4):
            fx, fy = rng.uniform(0.2, 2.5, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(
                2 * np.pi * (fx * xx / w + fy * yy / h) + ph
            )
        img[c] = acc
    # rectangles with random fill, shared across channels with a tint
    for _ in range(6):
        y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        dy, dx = rng.integers(4, h // 3), rng.integers(4, w // 3)
        tint = rng.uniform(-1.0, 1.0, size=3)
        img[:, y0 : y0 + dy, x0 : x0 + dx] += tint[:, None, None]
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img.astype(np.float32)
