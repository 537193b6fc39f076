"""Image I/O and LR/HR training data preparation.

HR images are center-cropped so their dims divide by 6 (x3 pairing plus the
head's x2 downscale), then degraded: bicubic x1/3 downscale followed by a
baseline JPEG round trip at the configured quality (4:2:0). A pre-degraded
LR directory can be supplied instead, in which case the codec never runs.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, IoError, ShapeError
from .metrics import bicubic_resize


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a (3, H, W) float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_png(t: np.ndarray, path) -> None:
    """Write a (3, H, W) [0, 1] array as 8-bit RGB, rounding half away from zero."""
    if t.ndim != 3 or t.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {t.shape}")
    q = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def jpeg_roundtrip(img: np.ndarray, quality: int = 90) -> np.ndarray:
    """Encode/decode through baseline JPEG (4:2:0) at the given quality."""
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(
        buf, format="JPEG", quality=quality, subsampling=2
    )
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (out.astype(np.float32) / 255.0).transpose(2, 0, 1)


def center_crop_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Center-crop the trailing two axes down to the nearest multiple."""
    h, w = img.shape[-2], img.shape[-1]
    nh, nw = h - h % multiple, w - w % multiple
    if nh < multiple or nw < multiple:
        raise ShapeError(f"image {h}x{w} smaller than one {multiple}-multiple")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[..., top : top + nh, left : left + nw]


@dataclass
class ImagePair:
    """One HR image and its degraded x1/3 LR counterpart."""

    hr: np.ndarray  # (3, H, W), H, W divisible by 6
    lr: np.ndarray  # (3, H/3, W/3), dims divisible by 2
    id: str

    @property
    def nbytes(self) -> int:
        return self.hr.nbytes + self.lr.nbytes


def prepare_pairs(
    hr_dir,
    scale: int = 3,
    jpeg_q: int = 90,
    lr_dir=None,
    skip_unreadable: bool = False,
) -> list[ImagePair]:
    """Decode a directory of HR PNGs into degraded LR/HR pairs.

    With lr_dir set, LR images with matching filenames are read directly and
    the downscale+JPEG step is skipped.
    """
    hr_dir = Path(hr_dir)
    files = sorted(p for p in hr_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ConfigError(f"no PNG files in {hr_dir}")
    pairs: list[ImagePair] = []
    for path in files:
        try:
            hr = load_png(path)
        except (IoError, FormatError):
            if skip_unreadable:
                import warnings

                warnings.warn(f"skipping unreadable {path}", stacklevel=2)
                continue
            raise
        hr = np.ascontiguousarray(center_crop_multiple(hr, 2 * scale))
        if lr_dir is not None:
            lr_path = Path(lr_dir) / path.name
            lr = load_png(lr_path)
            if lr.shape[1:] != (hr.shape[1] // scale, hr.shape[2] // scale):
                raise ShapeError(
                    f"{lr_path}: LR dims {lr.shape[1:]} do not match HR/{scale}"
                )
        else:
            lr = bicubic_resize(hr, hr.shape[1] // scale, hr.shape[2] // scale)
            lr = jpeg_roundtrip(lr, jpeg_q)
        pairs.append(ImagePair(hr=hr, lr=np.ascontiguousarray(lr), id=path.stem))
    return pairs


def pair_manifest(pairs: list[ImagePair]) -> list[dict]:
    """JSON-able description of prepared pairs (id, dims, content hash)."""
    out = []
    for p in pairs:
        digest = hashlib.sha256()
        digest.update(p.hr.tobytes())
        digest.update(p.lr.tobytes())
        out.append(
            {
                "id": p.id,
                "hr_dims": list(p.hr.shape),
                "lr_dims": list(p.lr.shape),
                "sha256": digest.hexdigest(),
            }
        )
    return out


class MemoryCache:
    """Decoded pairs pinned in RAM so sampling never touches the filesystem."""

    def __init__(self, pairs: list[ImagePair]):
        self.pairs = list(pairs)
        self.nbytes = sum(p.nbytes for p in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def preload(pairs: list[ImagePair]) -> MemoryCache:
    return MemoryCache(pairs)


@dataclass
class PatchBatch:
    lr: np.ndarray  # (B, 3, s, s)
    hr: np.ndarray  # (B, 3, 3s, 3s)


def sample_batch(pairs, batch: int, patch_lr: int, rng: np.random.Generator, scale: int = 3) -> PatchBatch:
    """Uniformly random LR patches with matched HR crops, each independently
    rotated by a multiple of 90 degrees and optionally flipped."""
    pairs = pairs.pairs if isinstance(pairs, MemoryCache) else list(pairs)
    if not pairs:
        raise ConfigError("cannot sample from an empty pair list")
    if patch_lr % 2 != 0:
        raise ConfigError(f"patch_lr must be even, got {patch_lr}")
    lr_out = np.empty((batch, 3, patch_lr, patch_lr), dtype=np.float32)
    hr_out = np.empty((batch, 3, scale * patch_lr, scale * patch_lr), dtype=np.float32)
    for b in range(batch):
        pair = pairs[rng.integers(len(pairs))]
        lh, lw = pair.lr.shape[1:]
        if patch_lr > lh or patch_lr > lw:
            raise ShapeError(f"patch {patch_lr} larger than LR image {lh}x{lw}")
        y = int(rng.integers(lh - patch_lr + 1))
        x = int(rng.integers(lw - patch_lr + 1))
        lp = pair.lr[:, y : y + patch_lr, x : x + patch_lr]
        hp = pair.hr[
            :,
            scale * y : scale * (y + patch_lr),
            scale * x : scale * (x + patch_lr),
        ]
        k = int(rng.integers(4))
        flip = bool(rng.integers(2))
        if k:
            lp = np.rot90(lp, k, axes=(1, 2))
            hp = np.rot90(hp, k, axes=(1, 2))
        if flip:
            lp = lp[:, :, ::-1]
            hp = hp[:, :, ::-1]
        lr_out[b] = lp
        hr_out[b] = hp
    return PatchBatch(lr=lr_out, hr=hr_out)
