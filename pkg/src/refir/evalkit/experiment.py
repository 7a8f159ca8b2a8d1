"""Grid experiments over reference providers and injection settings."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dual_chain import HQRef, NoRef, RandomRef, Retrieved, SelfRef, run_paired_restoration
from ..images import list_images, load_image
from ..injection import InjectionConfig
from ..restorer.checkpoint import CheckpointError, load_checkpoint
from ..restorer.degrade import DegradationConfig, degrade
from ..restorer.model import ToyRestorer, list_attention_sites
from ..restorer.schedule import NoiseSchedule
from ..retrieval import build_index, load_index
from .config import ConfigError, DataError, ExperimentConfig
from .corpus import generate_corpus
from .metrics import get_metric

log = logging.getLogger(__name__)

AXES = ("provider", "scale", "sites", "fusion_mode", "sg", "da", "k")


@dataclass(frozen=True)
class GridPoint:
    provider: str
    scale: float
    sites: str
    fusion_mode: str
    sg: bool
    da: bool
    k: int


@dataclass
class ResultsTable:
    metrics: list[str]
    rows: list[tuple[GridPoint, dict[str, float]]] = field(default_factory=list)
    per_image: list[tuple[GridPoint, str, dict[str, float]]] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def __repr__(self) -> str:
        return f"ResultsTable({len(self.rows)} rows, metrics={self.metrics}, config_hash={self.config_hash!r})"

    def header(self) -> list[str]:
        return [*AXES, *self.metrics, "seed", "config_hash"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for point, values in self.rows:
            writer.writerow([
                point.provider, f"{point.scale:g}", point.sites, point.fusion_mode,
                int(point.sg), int(point.da), point.k,
                *(f"{values[m]:.6f}" for m in self.metrics),
                self.seed, self.config_hash,
            ])
        return buf.getvalue()

    def lookup(self, **axes) -> dict[str, float]:
        hits = [v for p, v in self.rows if all(getattr(p, a) == x for a, x in axes.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {axes}")
        return hits[0]


def grid_points(config: ExperimentConfig) -> list[GridPoint]:
    return [GridPoint(*combo) for combo in itertools.product(
        config.providers, config.scales, config.site_sets, config.fusion_modes,
        config.sg, config.da, config.k)]


def resolve_sites(spec: str, model: ToyRestorer) -> tuple[str, ...]:
    """Expand a ``+``-joined site set; ``none`` injects nowhere (attention sharing off)."""
    sites = list_attention_sites(model)
    out: list[str] = []
    for part in spec.split("+"):
        part = part.strip()
        if part in ("encoder", "decoder", "condition_branch"):
            out += [s.site_id for s in sites if s.stage == part]
        elif part == "none":
            continue
        elif part == "all":
            out += [s.site_id for s in sites if s.stage != "condition_branch"]
        elif part in {s.site_id for s in sites}:
            out.append(part)
        else:
            raise ConfigError(f"unknown site or stage {part!r} in site set {spec!r}")
    return tuple(dict.fromkeys(out))


def _load_images(spec: str, what: str) -> dict[str, np.ndarray]:
    """A directory of images or ``procedural:<count>:<seed>``."""
    if spec.startswith("procedural:"):
        try:
            _, count, seed = spec.split(":")
            imgs = generate_corpus(int(count), seed=int(seed))
        except ValueError:
            raise ConfigError(f"bad procedural spec {spec!r}; use procedural:<count>:<seed>") from None
        return {f"tex{i:04d}": img for i, img in enumerate(imgs)}
    if not spec:
        raise DataError(f"no {what} configured")
    try:
        paths = list_images(spec)
    except FileNotFoundError as exc:
        raise DataError(f"{what}: {exc}") from None
    if not paths:
        raise DataError(f"{what}: no images in {spec}")
    return {p.stem: load_image(p) for p in paths}


def degradation_for(config: ExperimentConfig, i: int) -> DegradationConfig:
    seed = int(np.random.SeedSequence([config.seed, 2, i]).generate_state(1)[0])
    return DegradationConfig(scale=config.factor, blur_sigma=config.blur_sigma,
                             noise_sigma=config.noise_sigma, quantize=config.quantize, seed=seed)


def run_experiment(config: ExperimentConfig, out_dir=None, *, model: ToyRestorer | None = None,
                   images: dict[str, np.ndarray] | None = None,
                   pool: dict[str, np.ndarray] | None = None, plots: bool = True) -> ResultsTable:
    """Evaluate every grid point on every test image.

    ``model``, ``images`` and ``pool`` override the checkpoint and data
    paths in ``config``. Grid points with identical effective settings
    (e.g. every ``none`` row) are computed once.
    """
    metric_fns = {}
    for name in config.metrics:
        try:
            metric_fns[name] = get_metric(name)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    if model is None:
        try:
            model, _ = load_checkpoint(config.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"checkpoint: {exc}") from None
    if images is None:
        images = _load_images(config.data, "dataset")
    ids = sorted(images)
    if config.num_images:
        ids = ids[: config.num_images]
    needs_pool = {"random", "retrieved"} & set(config.providers)
    if needs_pool and pool is None:
        pool = _load_images(config.pool, "reference pool")
    index = None
    if "retrieved" in config.providers:
        if config.index:
            try:
                index = load_index(config.index)
            except OSError as exc:
                raise DataError(f"index: {exc}") from None
        else:
            index = _index_from_images(pool)

    schedule = NoiseSchedule(config.steps)
    table = ResultsTable(list(config.metrics), seed=config.seed, config_hash=config.config_hash())
    lqs = {i: degrade(images[i], degradation_for(config, n)) for n, i in enumerate(ids)}
    cache: dict[tuple, dict[str, dict[str, float]]] = {}
    for point in grid_points(config):
        sites = resolve_sites(point.sites, model)
        key = ("none",) if point.provider == "none" else (
            point.provider, point.scale, sites, point.fusion_mode, point.sg, point.da,
            point.k if point.provider == "retrieved" else 1)
        if key not in cache:
            inj = InjectionConfig(scale=point.scale, sites=sites, window=config.window,
                                  enable_sg=point.sg, enable_da=point.da, fusion_mode=point.fusion_mode)
            per = {}
            for n, image_id in enumerate(ids):
                provider = _provider(point, images[image_id], pool, index, config, image_id)
                result = run_paired_restoration(model, lqs[image_id], provider, inj,
                                                seed=config.seed + n, schedule=schedule,
                                                factor=config.factor)
                per[image_id] = {m: fn(result.restored, images[image_id]) for m, fn in metric_fns.items()}
            cache[key] = per
            log.info("%s: %s", point, {m: np.mean([v[m] for v in per.values()]) for m in metric_fns})
        per = cache[key]
        table.rows.append((point, {m: float(np.mean([per[i][m] for i in ids])) for m in metric_fns}))
        table.per_image += [(point, i, per[i]) for i in ids]
    if out_dir is not None:
        write_outputs(table, config, Path(out_dir), ids, plots)
    return table


def _index_from_images(pool):
    from ..retrieval import EmbeddingIndex, TinyGist, embed

    emb = TinyGist()
    keys = sorted(pool)
    return EmbeddingIndex.from_arrays(emb.embedder_id, keys, np.stack([embed(pool[k], emb) for k in keys]))


def _provider(point: GridPoint, hq, pool, index, config, image_id):
    if point.provider == "none":
        return NoRef()
    if point.provider == "hq":
        return HQRef(hq, image_id)
    if point.provider == "self":
        return SelfRef(config.factor)
    if point.provider == "random":
        return RandomRef({k: v for k, v in pool.items() if k != image_id}, seed=config.seed)
    return Retrieved(index, pool, k=point.k, exclude=(image_id,) if image_id in pool else (),
                     factor=config.factor)


def write_outputs(table: ResultsTable, config: ExperimentConfig, out: Path, ids, plots=True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    csv_text = table.to_csv()
    (out / "results.csv").write_text(csv_text, encoding="utf-8")
    with open(out / "per_image.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*AXES, "image_id", *table.metrics])
        for point, image_id, vals in table.per_image:
            writer.writerow([point.provider, f"{point.scale:g}", point.sites, point.fusion_mode,
                             int(point.sg), int(point.da), point.k, image_id,
                             *(f"{vals[m]:.6f}" for m in table.metrics)])
    manifest = {
        "config": config.to_text(),
        "config_hash": table.config_hash,
        "seed": config.seed,
        "images": list(ids),
        "results_sha256": hashlib.sha256(csv_text.encode("utf-8")).hexdigest(),
    }
    if config.checkpoint and Path(config.checkpoint).exists():
        manifest["checkpoint_sha256"] = hashlib.sha256(Path(config.checkpoint).read_bytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    if plots:
        from .plots import plot_results

        plot_results(table, out)
