"""Deterministic image and tensor kernels.

Conventions: an Image is a 2-D float64 array with values in [0, 1]; a
FeatureMap is a 3-D (channels, height, width) float64 array of unbounded
finite reals; a kernel bank is (out_ch, in_ch, kh, kw) with odd spatial taps.
All functions here are pure.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff
from .errors import ShapeError

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# Burt-Adelson 5-tap binomial, outer product normalized to 1
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
BLUR_KERNEL = np.outer(_BINOMIAL5, _BINOMIAL5)


def as_image(a) -> np.ndarray:
    img = np.asarray(a, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"image must be 2-D and non-empty, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return img


def as_feature_map(a) -> np.ndarray:
    fm = np.asarray(a, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[None]
    if fm.ndim != 3 or fm.shape[0] < 1:
        raise ShapeError(f"feature map must be (C,H,W), got shape {fm.shape}")
    if not np.isfinite(fm).all():
        raise ValueError("feature map contains non-finite values")
    return fm


def conv2d(x, kernels, bias=None, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Multi-channel 2-D cross-correlation. x: (C,H,W); kernels: (Co,C,kh,kw)."""
    x = as_feature_map(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    return autodiff.conv2d(x, kernels, bias=bias, stride=stride, padding=padding).data


def bilinear_upsample(x, factor: int) -> np.ndarray:
    """Scale a (C,H,W) map up by an integer factor per axis (half-pixel centers)."""
    x = as_feature_map(x)
    return autodiff.upsample_bilinear(x, factor).data


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = as_feature_map(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    return autodiff.bilinear_resize(x, out_h, out_w).data


def laplacian(image) -> np.ndarray:
    """Second-difference response, valid support only: (H,W) -> (H-2, W-2).

    Responses of constant and dyadic-affine images are exactly zero; the
    valid crop means the whole output is interior.
    """
    image = as_image(image)
    return autodiff.laplacian2d(image).data


def downsample2(x) -> np.ndarray:
    """2x2 mean pooling to ceil-half size; odd edges average the pixels present."""
    x = as_feature_map(x)
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"downsample2 needs at least 2x2 input, got {h}x{w}")
    if h % 2 == 0 and w % 2 == 0:
        return autodiff.downsample2_even(x).data
    ph, pw = h % 2, w % 2
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return autodiff.downsample2_even(xp).data


def blur5(image) -> np.ndarray:
    """5x5 binomial blur with reflected borders; preserves constants."""
    image = as_image(image)
    xp = np.pad(image, 2, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (5, 5))
    return np.tensordot(windows, BLUR_KERNEL, axes=([2, 3], [0, 1]))


def gaussian_pyramid(image, levels: int) -> list[np.ndarray]:
    """Level 0 is the input; each next level is binomial-blur then take every
    other sample (ceil-half size).
    """
    image = as_image(image)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    out = [image]
    cur = image
    for _ in range(levels - 1):
        if cur.shape[0] < 2 or cur.shape[1] < 2:
            raise ValueError(
                f"image of shape {image.shape} cannot be halved {levels - 1} times"
            )
        cur = blur5(cur)[::2, ::2]
        out.append(cur)
    return out


# -- 8-bit I/O -----------------------------------------------------------------


def quantize_u8(image) -> np.ndarray:
    """[0,1] float to byte with round-half-up."""
    image = as_image(image)
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize_u8(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def save_image(path: str | os.PathLike, image) -> None:
    """Write an 8-bit grayscale PNG or binary PGM (by extension), atomically."""
    raw = quantize_u8(image)
    path = os.fspath(path)
    tmp = path + ".tmp"
    if path.lower().endswith(".pgm"):
        h, w = raw.shape
        with open(tmp, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(raw.tobytes())
    else:
        from PIL import Image as PILImage

        PILImage.fromarray(raw, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit grayscale PNG or PGM into a [0,1] float image."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        with open(path, "rb") as fh:
            data = fh.read()
        fields: list[bytes] = []
        pos = 2
        while len(fields) < 3:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        pos += 1  # single whitespace after maxval
        w, h, maxval = (int(f) for f in fields)
        if maxval != 255:
            raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
        raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w)
    else:
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("L"), dtype=np.uint8)
    return dequantize_u8(raw)
