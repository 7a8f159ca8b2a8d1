"""Deterministic DDIM-style sampling over :class:`ToyRestorer`."""
from __future__ import annotations

from typing import Mapping

import torch

from .model import AttentionCapture, Hook, StepContext, ToyRestorer
from .schedule import NoiseSchedule


def batched(x) -> torch.Tensor | None:
    if x is None:
        return None
    x = torch.as_tensor(x, dtype=torch.float32)
    return x[None] if x.ndim == 3 else x


def initial_noise(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float32)


@torch.no_grad()
def predict_noise(model: ToyRestorer, latent, t: int, condition=None,
                  hooks: Mapping[str, Hook] | None = None,
                  schedule: NoiseSchedule | None = None):
    """One network evaluation at step ``t``; returns ``(eps, captures)``."""
    schedule = schedule or NoiseSchedule()
    if not 0 <= t < len(schedule):
        raise ValueError(f"t={t} outside [0, {len(schedule)})")
    x = batched(latent)
    cond = batched(condition)
    if cond is not None and cond.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"condition size {tuple(cond.shape[-2:])} != latent size {tuple(x.shape[-2:])}")
    ctx = StepContext(t=t, hooks=dict(hooks or {}))
    level = torch.full((x.shape[0],), schedule.noise_level(t))
    return model(x, level, cond, ctx), ctx.captures


def ddim_update(x: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Move ``x`` from level ``t`` to ``t - 1`` (the clean estimate when ``t == 0``)."""
    ab = schedule.alpha_bar[t].item()
    x0 = (x - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5
    x0 = x0.clamp(-1.0, 1.0)
    if t == 0:
        return x0
    eps = (x - ab ** 0.5 * x0) / (1.0 - ab) ** 0.5
    ab_prev = schedule.alpha_bar[t - 1].item()
    return ab_prev ** 0.5 * x0 + (1.0 - ab_prev) ** 0.5 * eps


def denoise_step(model: ToyRestorer, latent, t: int, condition=None,
                 hooks: Mapping[str, Hook] | None = None,
                 schedule: NoiseSchedule | None = None
                 ) -> tuple[torch.Tensor, dict[str, AttentionCapture]]:
    """Single reverse step; returns the next latent and every site's internals."""
    schedule = schedule or NoiseSchedule()
    x = batched(latent)
    eps, captures = predict_noise(model, x, t, condition, hooks, schedule)
    return ddim_update(x, eps, t, schedule), captures


def sample(model: ToyRestorer, lq_condition, schedule: NoiseSchedule | None = None,
           seed: int = 0, hooks: Mapping[str, Hook] | None = None) -> torch.Tensor:
    """Restore from pure noise; ``lq_condition`` is already at the output size.

    Returns a ``(B, C, H, W)`` tensor in ``[-1, 1]``.
    """
    schedule = schedule or NoiseSchedule()
    cond = batched(lq_condition)
    x = initial_noise((cond.shape[0], model.cfg.in_channels, *cond.shape[-2:]), seed)
    for t in reversed(range(len(schedule))):
        x, _ = denoise_step(model, x, t, cond, hooks, schedule)
    return x
