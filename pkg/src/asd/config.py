"""Experiment configuration: a TOML file with flag overrides and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from .data import SyntheticConfig
from .features import MfccConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    dataset: str = "data"  # directory holding manifest.jsonl
    out: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    val_fraction: float = 0.25
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    synthetic: SyntheticConfig | None = None

    def __post_init__(self):
        if not (0 <= self.val_fraction < 1):
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def dataset_dir(self) -> Path:
        return Path(self.paths.dataset)

    @property
    def manifest(self) -> Path:
        return self.dataset_dir / "manifest.jsonl"

    @property
    def run_dir(self) -> Path:
        return Path(self.paths.out) / self.model.fusion_mode

    def semantic_dict(self) -> dict:
        """Everything that changes results; paths and thread count are excluded."""
        model = self.model.to_dict()
        model.pop("temperature_video")
        model.pop("temperature_audio")
        return {
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "model": model,
            "train": dataclasses.asdict(self.train),
            "mfcc": dataclasses.asdict(self.mfcc),
            "synthetic": None if self.synthetic is None else dataclasses.asdict(self.synthetic),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_TUPLE_FIELDS = {"video_channels", "audio_channels", "face_count_distribution", "face_size_range"}


def _build(cls, section: dict[str, Any] | None, name: str, **forced):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS & set(section):
        section[key] = tuple(section[key])
    section.update(forced)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def from_dict(d: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    top = {"seed", "threads", "val_fraction", "paths", "model", "train", "mfcc", "synthetic"}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    paths = _build(Paths, d.get("paths"), "paths")
    if base_dir is not None:
        paths = Paths(*(str((base_dir / p).resolve()) if not Path(p).is_absolute() else p for p in (paths.dataset, paths.out)))
    return ExperimentConfig(
        seed=seed,
        threads=int(d.get("threads", 1)),
        val_fraction=float(d.get("val_fraction", 0.25)),
        paths=paths,
        model=_build(ModelConfig, d.get("model"), "model"),
        train=_build(TrainConfig, d.get("train"), "train", seed=seed),
        mfcc=_build(MfccConfig, d.get("mfcc"), "mfcc"),
        synthetic=_build(SyntheticConfig, d["synthetic"], "synthetic", seed=seed) if "synthetic" in d else None,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, base_dir=path.parent)


def with_overrides(
    cfg: ExperimentConfig,
    seed: int | None = None,
    fusion: str | None = None,
    threads: int | None = None,
    out: str | None = None,
) -> ExperimentConfig:
    """Apply command-line flags; flags win over the file."""
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=seed,
            train=dataclasses.replace(cfg.train, seed=seed),
            synthetic=None if cfg.synthetic is None else dataclasses.replace(cfg.synthetic, seed=seed),
        )
    if fusion is not None:
        try:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, fusion_mode=fusion))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if threads is not None:
        cfg = dataclasses.replace(cfg, threads=threads)
    if out is not None:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out=out))
    return cfg
