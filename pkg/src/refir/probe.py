"""Probing tools: PCA of attention-layer latents, radial power spectra,
per-stage frequency reports and attention allocation between chains."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .images import save_image, to_model, upscale
from .injection import InjectionConfig, attention_allocation
from .restorer.degrade import DegradationConfig, degrade
from .restorer.model import ToyRestorer, list_attention_sites
from .restorer.sampler import denoise_step, initial_noise, predict_noise
from .restorer.schedule import NoiseSchedule


MIN_SPECTRUM_SIZE = 8


@dataclass
class SpectrumCurve:
    radius: np.ndarray
    log_amplitude: np.ndarray

    def high_band(self, fraction: float = 0.25) -> float:
        """Mean log-amplitude over the top ``fraction`` of radii."""
        n = max(1, int(round(len(self.radius) * fraction)))
        return float(self.log_amplitude[-n:].mean())


@dataclass
class PCAResult:
    components: np.ndarray   # (3, C), rows orthonormal
    projection: np.ndarray   # (3, H, W), each channel min-max scaled to [0, 1]
    explained_variance_ratio: np.ndarray  # (3,)


def pca_top3(latent) -> PCAResult:
    """Treat pixels as samples in ``R^C`` and keep the top three principal axes."""
    latent = np.asarray(latent, dtype=np.float64)
    c, h, w = latent.shape
    if c < 3:
        raise ValueError(f"need at least 3 channels, got {c}")
    if h * w < 3:
        raise ValueError("need at least 3 pixels")
    x = latent.reshape(c, h * w).T
    x = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x, full_matrices=False)
    var = sv ** 2
    total = var.sum()
    ratios = var[:3] / total if total > 0 else np.zeros(3)
    if len(ratios) < 3:
        ratios = np.pad(ratios, (0, 3 - len(ratios)))
    comps = vt[:3]
    proj = (x @ comps.T).T.reshape(3, h, w)
    lo = proj.min(axis=(1, 2), keepdims=True)
    span = proj.max(axis=(1, 2), keepdims=True) - lo
    proj = np.where(span > 0, (proj - lo) / np.where(span > 0, span, 1.0), 0.0)
    return PCAResult(comps, proj, ratios)


def power_spectrum(latent) -> SpectrumCurve:
    """Channel-mean, 2-D DFT, ``log(1 + |F|)`` averaged over integer-radius annuli.

    Radii run from 0 (DC) to ``N // 2``; radius is ``round(sqrt(u^2 + v^2))``
    on centred frequency coordinates.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim == 2:
        latent = latent[None]
    _, h, w = latent.shape
    if h != w:
        raise ValueError(f"power spectrum needs a square input, got {h}x{w}")
    if h < MIN_SPECTRUM_SIZE:
        raise ValueError(f"input must be at least {MIN_SPECTRUM_SIZE}x{MIN_SPECTRUM_SIZE}")
    amp = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(latent.mean(axis=0)))))
    v, u = np.mgrid[0:h, 0:w]
    r = np.rint(np.hypot(u - w // 2, v - h // 2)).astype(int)
    keep = r <= h // 2
    sums = np.bincount(r[keep], amp[keep])
    counts = np.bincount(r[keep])
    radii = np.arange(len(sums))
    return SpectrumCurve(radii.astype(np.float64), sums / counts)


@dataclass
class ProbeReport:
    spectra: dict[tuple[str, int], SpectrumCurve] = field(default_factory=dict)
    pca: dict[str, PCAResult] = field(default_factory=dict)
    allocation: tuple[float, float] = (float("nan"), float("nan"))
    high_band: dict[str, float] = field(default_factory=dict)
    phases: dict[str, dict] = field(default_factory=dict)


def _depth_trend(values: list[float]) -> str:
    if len(values) < 2:
        return "n/a"
    diffs = np.diff(values)
    if np.all(diffs < 0):
        return "decreasing"
    if np.all(diffs > 0):
        return "increasing"
    return "mixed"


def probe_report(model: ToyRestorer, image: np.ndarray, schedule: NoiseSchedule | None = None,
                 out_dir=None, *, lq: np.ndarray | None = None, reference: np.ndarray | None = None,
                 identical_chain: bool = False, config: InjectionConfig = InjectionConfig(),
                 timesteps=None, pca_timestep: int = 0, factor: int = 4, seed: int = 0) -> ProbeReport:
    """One observe-only paired sampling pass with full capture.

    ``image`` is the HQ image in ``[0, 1]``. The LQ input defaults to a
    degraded copy; the reference chain is fed ``reference`` (default: the HQ
    image itself) or, with ``identical_chain``, the target chain's own
    latent and condition. Spectra are recorded for every site at each
    timestep in ``timesteps`` (default: all), skipping sites smaller than
    ``MIN_SPECTRUM_SIZE``; allocation is averaged over
    the scheduled sites and steps of ``config``.
    """
    schedule = schedule or NoiseSchedule()
    sites = list_attention_sites(model)
    config = config.resolve(sites, len(schedule))
    image = np.asarray(image, dtype=np.float32)
    if lq is None:
        lq = degrade(image, DegradationConfig(scale=factor, seed=seed))
    reference = image if reference is None else np.asarray(reference, dtype=np.float32)
    cond = torch.from_numpy(to_model(upscale(lq, factor)))[None]
    ref_x0 = torch.from_numpy(to_model(reference))[None]
    ref_eps = initial_noise(ref_x0.shape, seed + 1)
    wanted = set(range(len(schedule)) if timesteps is None else timesteps)

    spectral = [s for s in sites if s.resolution >= MIN_SPECTRUM_SIZE]
    report = ProbeReport()
    masses = []
    x = initial_noise((1, model.cfg.in_channels, *cond.shape[-2:]), seed)
    for t in reversed(range(len(schedule))):
        x_next, caps = denoise_step(model, x, t, cond, None, schedule)
        if t in wanted:
            for site in spectral:
                report.spectra[(site.site_id, t)] = power_spectrum(caps[site.site_id].h[0].numpy())
        if t == pca_timestep:
            for site in sites:
                report.pca[site.site_id] = pca_top3(caps[site.site_id].h[0].numpy())
        if t < config.window and config.sites:
            if identical_chain:
                src = caps
            else:
                _, src = predict_noise(model, schedule.add_noise(ref_x0, ref_eps, t), t, ref_x0,
                                       schedule=schedule)
            for sid in config.sites:
                masses.append(attention_allocation(caps[sid].q, caps[sid].k, src[sid].k))
        x = x_next
    if masses:
        report.allocation = tuple(float(v) for v in np.mean(masses, axis=0))

    for site in sites:
        curves = [c for (sid, _), c in report.spectra.items() if sid == site.site_id]
        if curves:
            report.high_band[site.site_id] = float(np.mean([c.high_band() for c in curves]))
    for stage in ("condition_branch", "decoder"):
        ordered = [s for s in sites if s.stage == stage]
        if stage == "condition_branch":
            ordered.sort(key=lambda s: -s.resolution)  # shallow -> deep
        else:
            ordered.sort(key=lambda s: s.resolution)   # deep -> output
        vals = [report.high_band[s.site_id] for s in ordered if s.site_id in report.high_band]
        report.phases[stage] = {
            "sites": [s.site_id for s in ordered],
            "high_band": vals,
            "trend": _depth_trend(vals),
        }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: ProbeReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "spectra.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius", "log_amplitude", "site_id", "t"])
        for (sid, t), curve in sorted(report.spectra.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
            for r, a in zip(curve.radius, curve.log_amplitude):
                writer.writerow([int(r), f"{a:.6f}", sid, t])
    for sid, res in report.pca.items():
        save_image(out / f"pca_{sid}.png", res.projection.astype(np.float32))
    summary = {
        "mass_t": report.allocation[0],
        "mass_s": report.allocation[1],
        "high_band": report.high_band,
        "phases": report.phases,
        "explained_variance": {sid: r.explained_variance_ratio.tolist() for sid, r in report.pca.items()},
    }
    (out / "allocation.json").write_text(json.dumps(summary, indent=2))
