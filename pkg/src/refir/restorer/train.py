"""Noise-prediction training for the toy restorer."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..images import list_images, load_image, to_model, upscale
from .degrade import DegradationConfig, degrade
from .model import ModelConfig, ToyRestorer
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> ToyRestorer:
    """Construct a model with seeded initial weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ToyRestorer(cfg or ModelConfig())


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    crop: int | None = None
    ema_decay: float | None = None
    grad_clip: float = 1.0
    seed: int = 0
    schedule_steps: int = 50


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def load_training_images(hq_image_directory) -> list[np.ndarray]:
    paths = list_images(hq_image_directory)
    if not paths:
        raise ValueError(f"no training images in {hq_image_directory}")
    return [load_image(p) for p in paths]


def make_pair(hq: np.ndarray, degradation: DegradationConfig, rng: np.random.Generator):
    """``(target, condition)`` in model domain; the condition is the bicubic-upsampled LQ."""
    lq = degrade(hq, degradation, rng=rng)
    return to_model(hq), to_model(upscale(lq, degradation.scale))


def train(model: ToyRestorer, images: Sequence[np.ndarray] | str | Path,
          degradation: DegradationConfig = DegradationConfig(),
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train in place. Data order is fixed; all randomness derives from ``config.seed``.

    ``images`` is a directory of HQ images or a sequence of ``[0, 1]`` arrays.
    Returns the per-epoch mean loss.
    """
    if isinstance(images, (str, Path)):
        images = load_training_images(images)
    if len(images) == 0:
        raise ValueError("empty training set")
    schedule = NoiseSchedule(config.schedule_steps)
    levels = torch.sqrt(1.0 - schedule.alpha_bar).float()
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=0.0)
    ema = copy.deepcopy(model).requires_grad_(False) if config.ema_decay else None
    result = TrainResult()
    start = time.perf_counter()
    model.train()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        pairs = [make_pair(img, degradation, rng) for img in images]
        total, batches = 0.0, 0
        for b in range(0, len(pairs), config.batch_size):
            chunk = pairs[b:b + config.batch_size]
            x0 = torch.from_numpy(np.stack([p[0] for p in chunk]))
            cond = torch.from_numpy(np.stack([p[1] for p in chunk]))
            if config.crop and config.crop < x0.shape[-1]:
                x0, cond = _random_crop(x0, cond, config.crop, gen)
            t = torch.randint(0, len(schedule), (x0.shape[0],), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            ab = schedule.alpha_bar[t].float()[:, None, None, None]
            xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
            loss = F.mse_loss(model(xt, levels[t], cond), noise)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for pe, pm in zip(ema.parameters(), model.parameters()):
                        pe.lerp_(pm, 1.0 - config.ema_decay)
            total += loss.item()
            batches += 1
            result.steps += 1
        result.losses.append(total / batches)
        log.info("epoch %d loss %.5f", epoch, result.losses[-1])
    if ema is not None:
        model.load_state_dict(ema.state_dict())
    model.eval()
    result.seconds = time.perf_counter() - start
    return result


def _random_crop(x0, cond, size, gen):
    h, w = x0.shape[-2:]
    out_x, out_c = [], []
    for i in range(x0.shape[0]):
        top = int(torch.randint(0, h - size + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - size + 1, (1,), generator=gen))
        out_x.append(x0[i, :, top:top + size, left:left + size])
        out_c.append(cond[i, :, top:top + size, left:left + size])
    return torch.stack(out_x), torch.stack(out_c)
