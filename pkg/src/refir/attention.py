"""Dense scaled dot-product attention shared by the denoiser and the injection code."""
from __future__ import annotations

import math

import torch


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q @ k^T / sqrt(d)) @ v`` over the last two axes."""
    scores = torch.matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return torch.matmul(torch.softmax(scores, dim=-1), v)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``(B, C, H, W) -> (B, heads, H*W, C // heads)``."""
    b, c, h, w = x.shape
    return x.reshape(b, heads, c // heads, h * w).transpose(-1, -2)


def merge_heads(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`split_heads`."""
    b, heads, n, d = x.shape
    return x.transpose(-1, -2).reshape(b, heads * d, height, width)
