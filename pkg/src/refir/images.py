"""Image helpers shared across the package.

Images are ``float32`` numpy arrays laid out ``C x H x W``. Files are read
and written in the ``[0, 1]`` domain; the denoiser works in ``[-1, 1]``.
"""
from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def load_image(path) -> np.ndarray:
    """Read an image file into a ``C x H x W`` float32 array in ``[0, 1]``."""
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def save_image(path, img: np.ndarray) -> None:
    """Write a ``[0, 1]`` image as 8-bit PNG (values are clipped)."""
    img = np.asarray(img, dtype=np.float32)
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_model(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def from_model(img: np.ndarray) -> np.ndarray:
    return (img + 1.0) / 2.0


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma; single-channel input is returned as ``H x W``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x < 1.0
    far = (x >= 1.0) & (x < 2.0)
    xn, xf = x[near], x[far]
    out[near] = ((a + 2.0) * xn - (a + 3.0)) * xn * xn + 1.0
    out[far] = (((xf - 5.0) * xf + 8.0) * xf - 4.0) * a
    return out


@lru_cache(maxsize=64)
def bicubic_weights(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``out_size x in_size`` resampling matrix for one axis.

    Follows Pillow's convolution resampler: Keys kernel with ``a = -0.5``,
    kernel stretched by the scale when downsampling (antialiasing), taps
    outside the image dropped and the remaining weights renormalised.
    """
    scale = in_size / out_size
    filterscale = max(scale, 1.0)
    support = 2.0 * filterscale
    w = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), in_size)
        taps = np.arange(lo, hi)
        k = _cubic((taps - center + 0.5) / filterscale)
        total = k.sum()
        if total != 0.0:
            k = k / total
        w[i, lo:hi] = k
    w.setflags(write=False)
    return w


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bicubic resize of a ``C x H x W`` array."""
    img = np.asarray(img)
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.astype(np.float32, copy=True)
    wy = bicubic_weights(h, height)
    wx = bicubic_weights(w, width)
    out = np.einsum("oh,chw,pw->cop", wy, img.astype(np.float64), wx)
    return out.astype(np.float32)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    _, h, w = img.shape
    return resize_bicubic(img, h * factor, w * factor)


def reflect_pad(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pad bottom/right by mirroring (boundary sample not repeated).

    Pads wider than the image are built by repeated mirroring.
    """
    out = np.asarray(img)
    while out.shape[1] < height or out.shape[2] < width:
        ph = min(height - out.shape[1], out.shape[1] - 1) if out.shape[1] < height else 0
        pw = min(width - out.shape[2], out.shape[2] - 1) if out.shape[2] < width else 0
        if ph <= 0 and pw <= 0:
            raise ValueError("cannot reflect-pad a 1-pixel axis")
        out = np.pad(out, ((0, 0), (0, max(ph, 0)), (0, max(pw, 0))), mode="reflect")
    return out


def fit_to(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Center-crop axes that are too long, reflect-pad axes that are too short."""
    _, h, w = img.shape
    top = max((h - height) // 2, 0)
    left = max((w - width) // 2, 0)
    img = img[:, top:top + min(h, height), left:left + min(w, width)]
    return np.ascontiguousarray(reflect_pad(img, height, width), dtype=np.float32)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect boundaries; ``sigma <= 0`` is a copy."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.astype(np.float32)
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="reflect")
    tmp = sum(k[i] * padded[:, i:i + img.shape[1], :] for i in range(len(k)))
    out = sum(k[i] * tmp[:, :, i:i + img.shape[2]] for i in range(len(k)))
    return out.astype(np.float32)
