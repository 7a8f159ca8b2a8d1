"""Paired denoising of the target chain and one or more reference chains.

At each scheduled step every reference is forward-noised to the current
level with a per-run fixed noise sample and pushed through one network
evaluation; the captured keys, values and hidden states then feed the
target chain's attention hooks. Information only flows reference -> target.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .images import fit_to, from_model, list_images, load_image, to_gray, to_model, upscale
from .injection import AttentionBundle, FusionTrace, InjectionConfig, apply_injection
from .restorer.model import AttentionCapture, ToyRestorer, list_attention_sites
from .restorer.sampler import denoise_step, initial_noise, predict_noise
from .restorer.schedule import NoiseSchedule
from .retrieval import EmbeddingIndex, query, reference_weights

log = logging.getLogger(__name__)


@dataclass
class Reference:
    image_id: str
    image: np.ndarray
    similarity: float | None = None


def _image_source(images) -> Callable[[str], np.ndarray]:
    if isinstance(images, Mapping):
        return lambda key: images[key]
    paths = {p.stem: p for p in list_images(images)}
    return lambda key: load_image(paths[key])


class ReferenceProvider:
    """Policy that supplies reference images for one LQ input."""

    name = "base"

    def references(self, lq: np.ndarray) -> list[Reference]:
        raise NotImplementedError


class NoRef(ReferenceProvider):
    name = "none"

    def references(self, lq):
        return []


class SelfRef(ReferenceProvider):
    """The bicubic-upsampled LQ image serves as its own reference."""

    name = "self"

    def __init__(self, factor: int = 4):
        self.factor = factor

    def references(self, lq):
        return [Reference("self", upscale(lq, self.factor))]


class HQRef(ReferenceProvider):
    name = "hq"

    def __init__(self, image: np.ndarray | str | Path, image_id: str = "hq"):
        self.image = image
        self.image_id = image_id

    def references(self, lq):
        img = self.image
        if isinstance(img, (str, Path)):
            path = Path(img)
            if not path.exists():
                raise FileNotFoundError(f"HQ reference not found: {path}")
            return [Reference(path.stem, load_image(path))]
        return [Reference(self.image_id, np.asarray(img, dtype=np.float32))]


class RandomRef(ReferenceProvider):
    """A pool image picked by a generator seeded from ``seed`` and the LQ content."""

    name = "random"

    def __init__(self, pool: Mapping[str, np.ndarray] | str | Path, seed: int = 0):
        self.load = _image_source(pool)
        self.ids = sorted(pool) if isinstance(pool, Mapping) else [p.stem for p in list_images(pool)]
        if not self.ids:
            raise ValueError("empty reference pool")
        self.seed = seed

    def references(self, lq):
        key = zlib.crc32(np.ascontiguousarray(lq, dtype=np.float32).tobytes())
        rng = np.random.default_rng([self.seed, key])
        pick = self.ids[int(rng.integers(len(self.ids)))]
        return [Reference(pick, self.load(pick))]


class Retrieved(ReferenceProvider):
    """Top-k database images for the LQ input, upsampled by ``factor`` to HQ scale before embedding."""

    name = "retrieved"

    def __init__(self, index: EmbeddingIndex, images: Mapping[str, np.ndarray] | str | Path,
                 k: int = 1, exclude: Sequence[str] = (), factor: int = 4):
        if len(index) == 0:
            raise ValueError("empty retrieval database")
        self.index = index
        self.load = _image_source(images)
        self.k = k
        self.exclude = set(exclude)
        self.factor = factor

    def references(self, lq):
        want = min(self.k + len(self.exclude), len(self.index))
        hits = [r for r in query(self.index, upscale(lq, self.factor), want) if r.image_id not in self.exclude][: self.k]
        return [Reference(r.image_id, self.load(r.image_id), r.similarity) for r in hits]


class Generated(ReferenceProvider):
    """Adapter for an external generator (e.g. captioner + text-to-image model).

    ``generator`` maps the LQ image to a list of ``[0, 1]`` images. None ships.
    """

    name = "generated"

    def __init__(self, generator: Callable[[np.ndarray], list[np.ndarray]] | None = None):
        self.generator = generator

    def references(self, lq):
        if self.generator is None:
            raise NotImplementedError("no reference generator plug-in configured")
        return [Reference(f"gen{i}", np.asarray(img, dtype=np.float32))
                for i, img in enumerate(self.generator(lq))]


def prepare_reference(lq: np.ndarray, provider: ReferenceProvider, target_size) -> list[Reference]:
    """Fetch references and fit each to ``target_size`` (crop or reflect-pad)."""
    th, tw = target_size
    out = []
    for ref in provider.references(lq):
        img = ref.image
        if img.shape[0] != lq.shape[0]:
            img = np.repeat(to_gray(img)[None], lq.shape[0], axis=0)
        out.append(Reference(ref.image_id, fit_to(np.asarray(img, np.float32), th, tw), ref.similarity))
    return out


@dataclass
class RestorationResult:
    restored: np.ndarray
    reference_ids: list[str]
    trace: FusionTrace
    strategy: str
    seed: int
    weights: list[float] = field(default_factory=list)
    score: float | None = None
    warnings: list[str] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "reference_ids": self.reference_ids,
            "weights": self.weights,
            "strategy": self.strategy,
            "seed": self.seed,
            "score": self.score,
            "warnings": self.warnings,
            "trace": self.trace.summary(),
        }


def _source_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, 1, n]).generate_state(1)[0])


def run_paired_restoration(model: ToyRestorer, lq: np.ndarray, provider: ReferenceProvider | None,
                           config: InjectionConfig = InjectionConfig(), seed: int = 0,
                           schedule: NoiseSchedule | None = None, factor: int = 4
                           ) -> RestorationResult:
    """Restore ``lq`` (``[0, 1]``, ``C x h x w``) at ``factor`` x its size."""
    schedule = schedule or NoiseSchedule()
    provider = provider or NoRef()
    sites = list_attention_sites(model)
    config = config.resolve(sites, len(schedule))
    site_ids = [s.site_id for s in sites]
    lq = np.asarray(lq, dtype=np.float32)
    cond = torch.from_numpy(to_model(upscale(lq, factor)))[None]
    size = tuple(cond.shape[-2:])
    refs = prepare_reference(lq, provider, size)
    if refs and refs[0].similarity is not None:
        weights = [float(w) for w in reference_weights([r.similarity for r in refs], config.scale)]
    else:
        weights = [config.scale / len(refs)] * len(refs) if refs else []

    ref_x0 = [torch.from_numpy(to_model(r.image))[None] for r in refs]
    ref_noise = [initial_noise(x.shape, _source_seed(seed, n)) for n, x in enumerate(ref_x0)]
    trace = FusionTrace()
    x = initial_noise((1, model.cfg.in_channels, *size), seed)
    for t in reversed(range(len(schedule))):
        hooks = {}
        if refs and config.sites and t < config.window:
            source_caps = []
            for x0, eps in zip(ref_x0, ref_noise):
                _, caps = predict_noise(model, schedule.add_noise(x0, eps, t), t, x0, schedule=schedule)
                source_caps.append(caps)
            hooks = {sid: _make_hook(sid, source_caps, config, weights, site_ids, trace)
                     for sid in config.sites}
        x, _ = denoise_step(model, x, t, cond, hooks, schedule)
    restored = np.clip(from_model(x[0].numpy()), 0.0, 1.0)
    return RestorationResult(restored, [r.image_id for r in refs], trace, provider.name, seed, weights)


def _make_hook(site_id: str, source_caps: list[dict[str, AttentionCapture]], config, weights,
               site_ids, trace):
    def hook(cap: AttentionCapture):
        bundles = [
            AttentionBundle(cap.q, cap.k, cap.v, src[site_id].k, src[site_id].v, site_id, cap.t,
                            out_s=src[site_id].out)
            for src in source_caps
        ]
        h_s = [src[site_id].h for src in source_caps]
        return apply_injection(site_id, cap.t, bundles, cap.h, h_s, config, weights, site_ids, trace)
    return hook


def sharpness_contrast(img: np.ndarray) -> float:
    """No-reference quality proxy: mean |Laplacian| of luma plus its standard deviation."""
    y = to_gray(np.asarray(img))
    p = np.pad(y, 1, mode="reflect")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * y
    return float(np.abs(lap).mean() + y.std())


def fallback_restore(model: ToyRestorer, lq: np.ndarray, strategies: Sequence[ReferenceProvider],
                     scorer: Callable[[np.ndarray], float] = sharpness_contrast,
                     config: InjectionConfig = InjectionConfig(), seed: int = 0,
                     schedule: NoiseSchedule | None = None, factor: int = 4,
                     run=run_paired_restoration) -> RestorationResult:
    """Run every strategy and keep the highest-scoring restoration (first wins ties)."""
    if not strategies:
        raise ValueError("need at least one strategy")
    best, warnings = None, []
    for provider in strategies:
        result = run(model, lq, provider, config, seed, schedule, factor)
        try:
            score = float(scorer(result.restored))
            if not np.isfinite(score):
                raise ValueError(f"non-finite score {score}")
        except Exception as exc:  # scorer plug-ins may fail arbitrarily
            msg = f"scorer failed on strategy {provider.name!r}: {exc}"
            log.warning(msg)
            warnings.append(msg)
            continue
        result.score = score
        if best is None or score > best.score:
            best = result
    if best is None:
        raise RuntimeError("scorer failed on every strategy: " + "; ".join(warnings))
    best.warnings = warnings + best.warnings
    return best
