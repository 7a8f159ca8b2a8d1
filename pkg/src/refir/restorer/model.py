"""Pixel-space UNet with a ControlNet-style condition branch.

Every self-attention layer is an :class:`AttentionSite`. During a forward
pass the layer hands an :class:`AttentionCapture` to an optional per-site
hook, which may return a replacement for the attention output.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attention import attention, merge_heads, split_heads

STAGES = ("encoder", "decoder", "condition_branch")
_PREFIX = {"encoder": "enc", "decoder": "dec", "condition_branch": "ctrl"}


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 64
    base_width: int = 64
    channel_mult: tuple[int, ...] = (1, 1, 2)
    attn_levels: tuple[int, ...] = (1, 2)
    heads: int = 4
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(self.attn_levels)
        if not self.attn_levels or max(self.attn_levels) >= len(self.channel_mult):
            raise ValueError("attn_levels must name existing levels")
        for m in self.channel_mult:
            if (self.base_width * m) % self.heads or (self.base_width * m) % self.groups:
                raise ValueError("level widths must be divisible by heads and groups")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttentionSite:
    site_id: str
    stage: str
    resolution: int


@dataclass
class AttentionCapture:
    """Internals of one attention layer for one forward pass.

    ``h`` is the hidden state entering the layer ``(B, C, H, W)``; ``q``,
    ``k``, ``v`` and ``out`` are per-head token matrices ``(B, heads, N, d)``.
    """

    site: AttentionSite
    t: int
    h: torch.Tensor
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    out: torch.Tensor


Hook = Callable[[AttentionCapture], Optional[torch.Tensor]]


@dataclass
class StepContext:
    t: int
    hooks: Mapping[str, Hook] = field(default_factory=dict)
    captures: dict[str, AttentionCapture] = field(default_factory=dict)
    keep: bool = True


class HookShapeError(ValueError):
    pass


def timestep_embedding(level: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = level.float()[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int, site: AttentionSite):
        super().__init__()
        self.site = site
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, ctx: StepContext | None):
        b, c, hgt, wid = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q, k, v = (split_heads(z, self.heads) for z in (q, k, v))
        out = attention(q, k, v)
        if ctx is not None:
            cap = AttentionCapture(self.site, ctx.t, x, q, k, v, out)
            if ctx.keep:
                ctx.captures[self.site.site_id] = cap
            hook = ctx.hooks.get(self.site.site_id)
            if hook is not None:
                sub = hook(cap)
                if sub is not None:
                    if sub.shape != out.shape:
                        raise HookShapeError(
                            f"hook at {self.site.site_id} returned shape {tuple(sub.shape)}, "
                            f"expected {tuple(out.shape)}"
                        )
                    out = sub.to(out.dtype)
        return x + self.proj(merge_heads(out, hgt, wid))


class Encoder(nn.Module):
    """Down path plus middle block; shared layout for the UNet and the condition branch."""

    def __init__(self, cfg: ModelConfig, tdim: int, stage: str):
        super().__init__()
        widths = [cfg.base_width * m for m in cfg.channel_mult]
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleDict()
        self.downs = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(prev, w, tdim, cfg.groups))
            if i in cfg.attn_levels:
                res = cfg.image_size >> i
                site = AttentionSite(f"{_PREFIX[stage]}.{res}", stage, res)
                self.attns[str(i)] = SelfAttention(w, cfg.heads, cfg.groups, site)
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid = ResBlock(prev, prev, tdim, cfg.groups)

    def forward(self, h, temb, ctx):
        skips = []
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            if str(i) in self.attns:
                h = self.attns[str(i)](h, ctx)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return skips, self.mid(h, temb)


class ToyRestorer(nn.Module):
    """Noise-prediction UNet; ``forward`` returns the predicted noise."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        widths = [cfg.base_width * m for m in cfg.channel_mult]
        c0 = widths[0]
        tdim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.encoder = Encoder(cfg, tdim, "encoder")

        self.dec_blocks = nn.ModuleList()
        self.dec_attns = nn.ModuleDict()
        self.ups = nn.ModuleList()
        cur = widths[-1]
        for i in reversed(range(len(widths))):
            self.dec_blocks.append(ResBlock(cur + widths[i], widths[i], tdim, cfg.groups))
            if i in cfg.attn_levels:
                res = cfg.image_size >> i
                site = AttentionSite(f"dec.{res}", "decoder", res)
                self.dec_attns[str(i)] = SelfAttention(widths[i], cfg.heads, cfg.groups, site)
            if i > 0:
                self.ups.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
            cur = widths[i] if i == 0 else widths[i - 1]
        self.norm_out = nn.GroupNorm(cfg.groups, c0)
        self.conv_out = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)

        # condition branch: encoder copy fed x_t plus a hint of the condition image
        self.ctrl_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.hint = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c0, 3, padding=1), nn.SiLU(), nn.Conv2d(c0, c0, 3, padding=1)
        )
        self.ctrl = Encoder(cfg, tdim, "condition_branch")
        self.zero_skips = nn.ModuleList(nn.Conv2d(w, w, 1) for w in widths)
        self.zero_mid = nn.Conv2d(widths[-1], widths[-1], 1)
        for conv in [*self.zero_skips, self.zero_mid]:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def attention_layers(self) -> list[SelfAttention]:
        enc = list(self.encoder.attns.values())
        dec = list(self.dec_attns.values())
        ctrl = list(self.ctrl.attns.values())
        return enc + dec + ctrl

    def forward(self, x, noise_level, cond=None, ctx: StepContext | None = None):
        temb = self.time_mlp(timestep_embedding(noise_level, self.conv_in.out_channels))
        skips, h = self.encoder(self.conv_in(x), temb, ctx)
        if cond is not None:
            c_skips, c_mid = self.ctrl(self.ctrl_in(x) + self.hint(cond), temb, ctx)
            skips = [s + z(cs) for s, z, cs in zip(skips, self.zero_skips, c_skips)]
            h = h + self.zero_mid(c_mid)
        n = len(skips)
        for j, block in enumerate(self.dec_blocks):
            i = n - 1 - j
            h = block(torch.cat([h, skips[i]], dim=1), temb)
            if str(i) in self.dec_attns:
                h = self.dec_attns[str(i)](h, ctx)
            if i > 0:
                h = self.ups[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def list_attention_sites(model: ToyRestorer) -> list[AttentionSite]:
    """Every attention site: encoder, decoder, then condition branch, in forward order."""
    return [layer.site for layer in model.attention_layers()]
