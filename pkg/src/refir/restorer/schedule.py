from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine ``alpha_bar`` schedule over ``total_steps`` discrete levels.

    Index ``T - 1`` is the noisiest level and index 0 the cleanest; sampling
    walks from ``T - 1`` down to 0.
    """

    total_steps: int = 50
    min_alpha_bar: float = 1e-4
    alpha_bar: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("a schedule needs at least 2 steps")
        u = (torch.arange(self.total_steps, dtype=torch.float64) + 1) / self.total_steps
        ab = torch.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2
        ab = ab.clamp(min=self.min_alpha_bar, max=1.0)
        object.__setattr__(self, "alpha_bar", ab)

    def __len__(self) -> int:
        return self.total_steps

    def noise_level(self, t: int) -> float:
        """Standard deviation of the noise component at step ``t``."""
        return float(torch.sqrt(1.0 - self.alpha_bar[t]))

    def signal_level(self, t: int) -> float:
        return float(torch.sqrt(self.alpha_bar[t]))

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        return self.signal_level(t) * x0 + self.noise_level(t) * noise
