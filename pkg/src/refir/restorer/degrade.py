"""Simplified second-order degradation: (blur, downsample, noise, quantise) x 2."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..images import gaussian_blur, resize_bicubic


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 4
    blur_sigma: tuple[float, float] = (0.2, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.02)
    quantize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        for lo, hi in (self.blur_sigma, self.noise_sigma):
            if lo < 0 or hi < lo:
                raise ValueError("sigma ranges must satisfy 0 <= lo <= hi")


def pass_sizes(size: int, scale: int) -> tuple[int, int]:
    """Intermediate and final size; the first pass covers ~sqrt(scale)."""
    final = size // scale
    mid = max(final, int(round(size / math.sqrt(scale))))
    return mid, final


def degrade(hq: np.ndarray, config: DegradationConfig = DegradationConfig(),
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Degrade a ``[0, 1]`` ``C x H x W`` image to ``H/scale x W/scale``.

    Each of the two passes draws its own blur and noise sigma uniformly from
    the configured ranges. ``rng`` overrides ``config.seed`` when given.
    """
    hq = np.asarray(hq, dtype=np.float32)
    _, h, w = hq.shape
    s = config.scale
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} not divisible by scale {s}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    mid_h, out_h = pass_sizes(h, s)
    mid_w, out_w = pass_sizes(w, s)
    img = hq
    for th, tw in ((mid_h, mid_w), (out_h, out_w)):
        blur = rng.uniform(*config.blur_sigma)
        noise = rng.uniform(*config.noise_sigma)
        img = gaussian_blur(img, blur)
        img = resize_bicubic(img, th, tw)
        if noise > 0:
            img = img + rng.normal(0.0, noise, img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 1.0)
        if config.quantize:
            img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32)
