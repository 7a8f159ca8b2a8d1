"""Cross-image attention injection.

The target chain's queries attend to its own keys/values (intra) and, in a
separate softmax, to each reference chain's keys/values (inter). A
per-pixel gate built from hidden-state cosine similarity decides where the
inter result is blended in, and AdaIN pulls the blend back onto the intra
statistics before it replaces the layer's attention output.

Attention products run in the dtype of the inputs, so the intra result is
bit-identical to the denoiser's own attention. Gating, blending and
alignment run in float64 and are cast back at the end.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .attention import attention

FUSION_MODES = ("separate", "concat", "replace")
ADAIN_EPS = 1e-5
DEGENERATE_TOL = 1e-12


class UnknownSiteError(KeyError):
    pass


@dataclass
class AttentionBundle:
    """Per-head token matrices ``(..., heads, tokens, d)`` at one site and step.

    ``out_s`` is the reference chain's own attention output; only the
    ``replace`` fusion mode needs it.
    """

    q_t: torch.Tensor
    k_t: torch.Tensor
    v_t: torch.Tensor
    k_s: torch.Tensor
    v_s: torch.Tensor
    site_id: str = ""
    t: int = 0
    out_s: torch.Tensor | None = None

    def __post_init__(self):
        ref = self.q_t.shape
        for name in ("k_t", "v_t", "k_s", "v_s"):
            shape = getattr(self, name).shape
            if shape[:-2] != ref[:-2] or shape[-1] != ref[-1]:
                raise ValueError(f"{name} shape {tuple(shape)} incompatible with q_t {tuple(ref)}")
        if self.k_t.shape[-2] != self.v_t.shape[-2] or self.k_s.shape[-2] != self.v_s.shape[-2]:
            raise ValueError("keys and values disagree on token count")

    @property
    def heads(self) -> int:
        return self.q_t.shape[-3] if self.q_t.ndim >= 3 else 1


@dataclass
class GateMask:
    mask: torch.Tensor
    degenerate: bool = False
    zero_pixels: int = 0


@dataclass
class InjectionConfig:
    scale: float = 0.5
    sites: tuple[str, ...] | None = None  # None: every decoder site
    window: int = 20
    enable_sg: bool = True
    enable_da: bool = True
    fusion_mode: str = "separate"

    def __post_init__(self):
        if not 0.0 <= self.scale <= 1.0:
            raise ValueError(f"scale {self.scale} outside [0, 1]")
        if self.window < 0:
            raise ValueError("window must be non-negative")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.sites is not None:
            self.sites = tuple(self.sites)

    def resolve(self, model_sites, total_steps: int) -> "InjectionConfig":
        """Fill the default site set and check the config against a model."""
        ids = [s.site_id for s in model_sites]
        sites = self.sites
        if sites is None:
            sites = tuple(s.site_id for s in model_sites if s.stage == "decoder")
        unknown = [s for s in sites if s not in ids]
        if unknown:
            raise UnknownSiteError(f"sites not in model: {unknown}")
        if self.window > total_steps:
            raise ValueError(f"window {self.window} exceeds schedule length {total_steps}")
        return replace(self, sites=tuple(sites))

    def scheduled(self, site_id: str, t: int) -> bool:
        return site_id in (self.sites or ()) and t < self.window


@dataclass
class TraceEntry:
    site_id: str
    t: int
    fired: bool
    mask_min: float = float("nan")
    mask_max: float = float("nan")
    mask_mean: float = float("nan")
    degenerate: bool = False
    zero_pixels: int = 0
    mass_t: float = float("nan")
    mass_s: float = float("nan")


@dataclass
class FusionTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def summary(self) -> dict:
        fired = [e for e in self.entries if e.fired]
        def mean(attr):
            vals = [getattr(e, attr) for e in fired if getattr(e, attr) == getattr(e, attr)]
            return sum(vals) / len(vals) if vals else None
        return {
            "entries": len(self.entries),
            "fired": len(fired),
            "mean_mask": mean("mask_mean"),
            "mean_mass_t": mean("mass_t"),
            "mean_mass_s": mean("mass_s"),
            "degenerate_masks": sum(e.degenerate for e in fired),
        }


def separate_attention(bundle: AttentionBundle) -> tuple[torch.Tensor, torch.Tensor]:
    """``(O_intra, O_inter)``: target queries against target and source keys separately."""
    o_intra = attention(bundle.q_t, bundle.k_t, bundle.v_t)
    o_inter = attention(bundle.q_t, bundle.k_s, bundle.v_s)
    return o_intra, o_inter


def concat_attention(q_t, keys: Sequence[torch.Tensor], values: Sequence[torch.Tensor]) -> torch.Tensor:
    """One softmax over all keys stacked along the token axis, in float64."""
    return attention(q_t.double(), torch.cat(list(keys), dim=-2).double(),
                     torch.cat(list(values), dim=-2).double())


def gate_mask(h_t: torch.Tensor, h_s: torch.Tensor) -> GateMask:
    """Per-pixel utility of ``h_s`` for ``h_t``, min-max scaled to ``[0, 1]``.

    Inputs are ``(..., C, H, W)``. Row ``i`` of the pixel-wise cosine matrix
    sums to ``<a_i, sum_j b_j>`` for unit pixel vectors ``a``, ``b``, so the
    ``HW x HW`` matrix is never formed. Zero-norm pixels contribute cosine 0.
    A flat row-sum map (max == min) yields an all-ones mask.
    """
    if h_t.shape != h_s.shape:
        raise ValueError(f"hidden states differ in shape: {tuple(h_t.shape)} vs {tuple(h_s.shape)}")
    *lead, c, hgt, wid = h_t.shape
    a = h_t.reshape(*lead, c, hgt * wid).double()
    b = h_s.reshape(*lead, c, hgt * wid).double()
    na = a.norm(dim=-2, keepdim=True)
    nb = b.norm(dim=-2, keepdim=True)
    zero = int((na == 0).sum() + (nb == 0).sum())
    a = torch.where(na > 0, a / na.clamp_min(1e-300), torch.zeros_like(a))
    b = torch.where(nb > 0, b / nb.clamp_min(1e-300), torch.zeros_like(b))
    rows = (a * b.sum(dim=-1, keepdim=True)).sum(dim=-2)  # (..., HW)
    lo = rows.amin(dim=-1, keepdim=True)
    hi = rows.amax(dim=-1, keepdim=True)
    span = hi - lo
    flat = span <= DEGENERATE_TOL * torch.clamp(hi.abs(), min=1.0)
    mask = torch.where(flat, torch.ones_like(rows), (rows - lo) / torch.where(flat, 1.0, span))
    return GateMask(mask.reshape(*lead, hgt, wid), bool(flat.any()), zero)


def _token_mask(mask, like: torch.Tensor) -> torch.Tensor:
    """Broadcast an ``(..., H, W)`` mask (or scalar) to ``(..., heads, N, d)``."""
    if isinstance(mask, GateMask):
        mask = mask.mask
    mask = torch.as_tensor(mask, dtype=torch.float64)
    if mask.ndim < 2:
        return mask
    return mask.reshape(*mask.shape[:-2], 1, -1, 1)


def fuse(o_intra: torch.Tensor, inters: Sequence[torch.Tensor], masks: Sequence,
         weights: Sequence[float]) -> torch.Tensor:
    """``(1 - sum s_n M_n) * O_intra + sum s_n M_n * O_inter_n`` in float64."""
    if not (len(inters) == len(masks) == len(weights)) or not inters:
        raise ValueError("inters, masks and weights must have the same non-zero length")
    total = float(sum(weights))
    if total > 1.0 + 1e-12:
        raise ValueError(f"weights sum to {total} > 1")
    gate = 0.0
    blend = 0.0
    for o, m, s in zip(inters, masks, weights):
        sm = float(s) * _token_mask(m, o)
        gate = gate + sm
        blend = blend + sm * o.double()
    return (1.0 - gate) * o_intra.double() + blend


def distribution_align(o_fuse: torch.Tensor, o_intra: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """AdaIN over the token axis (``-2``), one statistic per channel."""
    if o_fuse.shape != o_intra.shape:
        raise ValueError("AdaIN inputs differ in shape")
    u = o_fuse.double()
    v = o_intra.double()
    mu_u = u.mean(dim=-2, keepdim=True)
    sd_u = u.std(dim=-2, keepdim=True, unbiased=False)
    mu_v = v.mean(dim=-2, keepdim=True)
    sd_v = v.std(dim=-2, keepdim=True, unbiased=False)
    return (u - mu_u) / sd_u.clamp_min(eps) * sd_v + mu_v


def attention_allocation(q_t, k_t, k_s) -> tuple[float, float]:
    """Mean softmax mass that target queries put on target vs source keys.

    One softmax runs over the concatenated keys; the masses are averaged
    over queries (and heads/batch).
    """
    q = q_t.double()
    keys = torch.cat([k_t.double(), k_s.double()], dim=-2)
    probs = torch.softmax(q @ keys.transpose(-1, -2) / q.shape[-1] ** 0.5, dim=-1)
    mass_t = probs[..., : k_t.shape[-2]].sum(-1).mean().item()
    mass_s = probs[..., k_t.shape[-2]:].sum(-1).mean().item()
    return mass_t, mass_s


def apply_injection(site_id: str, t: int, bundles, h_t, h_s, config: InjectionConfig,
                    weights: Sequence[float] | None = None, model_sites: Sequence[str] | None = None,
                    trace: FusionTrace | None = None) -> torch.Tensor | None:
    """Substitute attention output for one site/step, or ``None`` to pass through.

    ``bundles``/``h_s`` may be single objects or per-reference sequences that
    share the target tensors. ``weights`` defaults to ``[config.scale]``.
    """
    if model_sites is not None and site_id not in model_sites:
        raise UnknownSiteError(site_id)
    if not config.scheduled(site_id, t):
        return None
    if isinstance(bundles, AttentionBundle):
        bundles = [bundles]
    if isinstance(h_s, torch.Tensor):
        h_s = [h_s]
    if len(h_s) != len(bundles):
        raise ValueError("one hidden state per reference bundle required")
    if not bundles:
        return None
    weights = [config.scale] if weights is None else list(weights)
    if len(weights) != len(bundles):
        raise ValueError("one weight per reference bundle required")
    first = bundles[0]
    dtype = first.q_t.dtype
    entry = TraceEntry(site_id, t, fired=True)
    entry.mass_t, entry.mass_s = attention_allocation(
        first.q_t, first.k_t, torch.cat([b.k_s for b in bundles], dim=-2))

    if config.fusion_mode == "concat":
        out = concat_attention(first.q_t, [first.k_t, *(b.k_s for b in bundles)],
                               [first.v_t, *(b.v_s for b in bundles)])
    elif config.fusion_mode == "replace":
        best = max(range(len(bundles)), key=lambda i: weights[i])
        if bundles[best].out_s is None:
            raise ValueError("replace mode needs the source attention output (out_s)")
        out = bundles[best].out_s
    else:
        o_intra = attention(first.q_t, first.k_t, first.v_t)
        inters = [attention(b.q_t, b.k_s, b.v_s) for b in bundles]
        if config.enable_sg:
            masks = [gate_mask(h_t, hs) for hs in h_s]
            stats = torch.stack([m.mask for m in masks])
            entry.mask_min, entry.mask_max = stats.min().item(), stats.max().item()
            entry.mask_mean = stats.mean().item()
            entry.degenerate = any(m.degenerate for m in masks)
            entry.zero_pixels = sum(m.zero_pixels for m in masks)
        else:
            masks = [1.0] * len(bundles)
            entry.mask_min = entry.mask_max = entry.mask_mean = 1.0
        out = fuse(o_intra, inters, masks, weights)
        if config.enable_da:
            out = distribution_align(out, o_intra)
    if trace is not None:
        trace.entries.append(entry)
    return out.to(dtype)
