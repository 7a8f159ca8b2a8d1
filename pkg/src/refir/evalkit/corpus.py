"""Procedural texture corpus: stripes, checkers, value noise, dots and rings.

Each image pairs a low-frequency layout (a smooth blend between two colour
regions) with a fine periodic or noise texture whose period sits near or
below the LQ Nyquist limit, so ×4 degradation removes most of it.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..images import save_image

FAMILIES = ("stripes", "checker", "noise", "dots", "rings")


def _value_noise(rng, size, cell):
    n = size // cell + 2
    grid = rng.random((n, n))
    y, x = np.mgrid[0:size, 0:size] / cell
    y0, x0 = y.astype(int), x.astype(int)
    fy, fx = y - y0, x - x0
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x0 + 1] * fx
    bot = grid[y0 + 1, x0] * (1 - fx) + grid[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _pattern(rng, family, size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 9.0)
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    if family == "stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
    if family == "checker":
        return ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.float64)
    if family == "noise":
        return _value_noise(rng, size, int(rng.integers(2, 5)))
    if family == "dots":
        cu, cv = (u % period) - period / 2, (v % period) - period / 2
        return (np.hypot(cu, cv) < period * rng.uniform(0.2, 0.4)).astype(np.float64)
    cy, cx = rng.uniform(0, size, 2)
    return 0.5 + 0.5 * np.cos(2 * np.pi * np.hypot(x - cx, y - cy) / period)


def texture_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One ``3 x size x size`` image in ``[0, 1]``."""
    families = rng.choice(len(FAMILIES), size=2, replace=False)
    layout = _value_noise(rng, size, size // 2)
    layout = np.clip((layout - layout.mean()) * 4 + 0.5, 0, 1)
    img = np.zeros((3, size, size))
    for weight, fam in ((layout, families[0]), (1 - layout, families[1])):
        tex = _pattern(rng, FAMILIES[fam], size)
        dark, light = rng.random(3) * 0.5, 0.5 + rng.random(3) * 0.5
        img += weight * (dark[:, None, None] + (light - dark)[:, None, None] * tex)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_corpus(count: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [texture_image(rng, size) for _ in range(count)]


def write_corpus(directory, count: int, size: int = 64, seed: int = 0, prefix: str = "tex") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(generate_corpus(count, size, seed)):
        path = directory / f"{prefix}{i:04d}.png"
        save_image(path, img)
        paths.append(path)
    return paths
