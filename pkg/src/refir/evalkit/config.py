"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored; list values are comma
separated. Site sets use ``+`` to join stage aliases (``encoder``,
``decoder``, ``condition_branch``, ``all``, ``none``) or explicit site
ids, e.g. ``site_sets = decoder, encoder, encoder+decoder``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

PROVIDERS = ("none", "hq", "self", "random", "retrieved")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry (CLI exit code 1)."""


class DataError(RuntimeError):
    """Missing or unreadable dataset, checkpoint or index (CLI exit code 2)."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _range(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(":")]
    if len(parts) == 1:
        return float(parts[0]), float(parts[0])
    if len(parts) != 2:
        raise ConfigError(f"range must be 'lo:hi', got {text!r}")
    return float(parts[0]), float(parts[1])


@dataclass
class ExperimentConfig:
    data: str = ""
    pool: str = ""
    index: str = ""
    checkpoint: str = ""
    providers: list[str] = field(default_factory=lambda: ["none", "hq"])
    scales: list[float] = field(default_factory=lambda: [0.5])
    site_sets: list[str] = field(default_factory=lambda: ["decoder"])
    fusion_modes: list[str] = field(default_factory=lambda: ["separate"])
    sg: list[bool] = field(default_factory=lambda: [True])
    da: list[bool] = field(default_factory=lambda: [True])
    k: list[int] = field(default_factory=lambda: [1])
    metrics: list[str] = field(default_factory=lambda: ["psnr", "ssim"])
    seed: int = 0
    steps: int = 50
    window: int = 20
    factor: int = 4
    num_images: int = 0
    blur_sigma: tuple[float, float] = (0.2, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.02)
    quantize: bool = True

    _PARSERS = {
        "providers": lambda v: [p.strip() for p in v.split(",") if p.strip()],
        "scales": lambda v: [float(p) for p in v.split(",")],
        "site_sets": lambda v: [p.strip() for p in v.split(",") if p.strip()],
        "fusion_modes": lambda v: [p.strip() for p in v.split(",") if p.strip()],
        "sg": lambda v: [_bool(p) for p in v.split(",")],
        "da": lambda v: [_bool(p) for p in v.split(",")],
        "k": lambda v: [int(p) for p in v.split(",")],
        "metrics": lambda v: [p.strip() for p in v.split(",") if p.strip()],
        "seed": int, "steps": int, "window": int, "factor": int, "num_images": int,
        "blur_sigma": _range, "noise_sigma": _range, "quantize": _bool,
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        from ..injection import FUSION_MODES

        axes = {"providers": self.providers, "scales": self.scales, "site_sets": self.site_sets,
                "fusion_modes": self.fusion_modes, "sg": self.sg, "da": self.da, "k": self.k}
        for name, values in axes.items():
            if not values:
                raise ConfigError(f"grid axis {name!r} is empty")
        bad = [p for p in self.providers if p not in PROVIDERS]
        if bad:
            raise ConfigError(f"unknown providers {bad}; choose from {PROVIDERS}")
        bad = [m for m in self.fusion_modes if m not in FUSION_MODES]
        if bad:
            raise ConfigError(f"unknown fusion modes {bad}")
        if any(not 0.0 <= s <= 1.0 for s in self.scales):
            raise ConfigError("scales must lie in [0, 1]")
        if any(k < 1 for k in self.k):
            raise ConfigError("k values must be >= 1")
        if self.steps < 2 or not 0 <= self.window <= self.steps:
            raise ConfigError("need steps >= 2 and 0 <= window <= steps")

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            parse = cls._PARSERS.get(key, str)
            try:
                values[key] = parse(value)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = f"{value[0]}:{value[1]}"
            elif isinstance(value, list):
                text = ",".join(str(v).lower() if isinstance(v, bool) else str(v) for v in value)
            else:
                text = str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]
