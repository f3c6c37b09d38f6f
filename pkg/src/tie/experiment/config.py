"""Strict JSON experiment configuration.

Every section rejects unknown keys, so a misspelt hyperparameter fails
validation instead of silently falling back to its default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..data import Dataset, SynthSpec, load_idx_dataset, synth_blobs
from ..oodscores import ScoreSettings
from ..tieloop import TieConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthData(_Strict):
    kind: Literal["synth"] = "synth"
    means: list[tuple[float, float]]
    stds: list[float]
    samples_per_class: int = Field(500, gt=0)
    ood_kind: Literal["ring", "uniform"] = "ring"
    ring_radius: float = 10.0
    ring_width: float = 1.0
    box: float = 10.0
    ood_count: int = Field(1000, gt=0)
    extent: float = Field(12.0, gt=0)
    center: tuple[float, float] = (0.5, 0.5)
    train_seed: int = 1
    test_seed: int = 2

    @model_validator(mode="after")
    def _check_spec(self):
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must have one entry per class")
        self.spec()
        return self

    @property
    def n_classes(self) -> int:
        return len(self.means)

    def spec(self) -> SynthSpec:
        return SynthSpec(means=self.means, stds=self.stds, samples_per_class=self.samples_per_class,
                         ood_kind=self.ood_kind, ring_radius=self.ring_radius, ring_width=self.ring_width,
                         box=self.box, ood_count=self.ood_count, extent=self.extent, center=self.center)


class IdxOod(_Strict):
    images: str
    limit: int | None = Field(None, gt=0)


class IdxData(_Strict):
    kind: Literal["idx"] = "idx"
    n_classes: int = Field(gt=1)
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    ood: dict[str, IdxOod] = Field(default_factory=dict)
    downsample: int = Field(1, ge=1)
    train_limit: int | None = Field(None, gt=0)
    test_limit: int | None = Field(None, gt=0)


class TieSettings(_Strict):
    epochs: int = Field(20, ge=1)
    lam: float = Field(0.5, ge=0)
    lr_clf: float = Field(1e-4, gt=0)
    lr_gen: float = Field(1e-3, gt=0)
    per_class_inversions: int = Field(200, gt=0)
    alpha: float = 0.1
    beta: float = 1.0
    gamma0: float = 10.0
    gamma_max: float = 100.0
    batch_size: int = Field(64, gt=0)
    inversion_batch: int = Field(64, ge=2)
    inversion_steps: int = Field(100, ge=0)
    garbage_init_count: int | None = Field(None, gt=0)
    garbage_cap: int | None = Field(None, gt=0)
    clf_hidden: tuple[int, ...] = (256, 128)
    gen_hidden: tuple[int, ...] = (128, 256)
    latent_dim: int = Field(32, gt=0)
    sign_mode: Literal[-1, 1] = -1


class ScoreConfig(_Strict):
    odin_temperature: float = Field(1000.0, gt=0)
    odin_epsilon: float = Field(0.0014, ge=0)
    energy_temperature: float = Field(1.0, gt=0)
    eps_cov: float | None = Field(None, gt=0)

    def settings(self) -> ScoreSettings:
        return ScoreSettings(self.odin_temperature, self.odin_epsilon, self.energy_temperature)


class ExperimentConfig(_Strict):
    data: Annotated[Union[SynthData, IdxData], Field(discriminator="kind")]
    tie: TieSettings = TieSettings()
    scores: ScoreConfig = ScoreConfig()
    seed: int = 0
    mode: Literal["tie", "no_tie_baseline"] = "tie"
    out_dir: str | None = None

    def tie_config(self) -> TieConfig:
        return TieConfig(n=self.data.n_classes, seed=self.seed, mode=self.mode, **self.tie.model_dump())

    def canonical_json(self) -> str:
        """Sorted-key JSON of everything that affects results (the output path does not)."""
        return json.dumps(self.model_dump(mode="json", exclude={"out_dir"}), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, mode: str | None = None,
                       out_dir: str | None = None) -> "ExperimentConfig":
        changes = {k: v for k, v in (("seed", seed), ("mode", mode), ("out_dir", out_dir)) if v is not None}
        return parse_config(self.model_dump(mode="json") | changes) if changes else self


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config mapping; relative IDX paths resolve against ``base_dir``."""
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from exc
    if base_dir is not None and isinstance(cfg.data, IdxData):
        cfg = ExperimentConfig.model_validate(cfg.model_dump(mode="json") | {"data": _resolve(cfg.data, base_dir)})
    return cfg


def _resolve(data: IdxData, base: Path) -> dict:
    def fix(p: str) -> str:
        return p if Path(p).is_absolute() else str((base / p).resolve())

    raw = data.model_dump(mode="json")
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        raw[key] = fix(raw[key])
    for entry in raw["ood"].values():
        entry["images"] = fix(entry["images"])
    return raw


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(raw, path.parent)


class Datasets(BaseModel):
    """Loaded train/test splits plus named OOD sets."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: Dataset
    test: Dataset
    ood: dict[str, Dataset]
    image_shape: tuple[int, int] | None = None


def load_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.data
    if isinstance(d, SynthData):
        spec = d.spec()
        train, _ = synth_blobs(spec, d.train_seed)
        test, ood = synth_blobs(spec, d.test_seed)
        return Datasets(train=train, test=test, ood={ood.name: ood})
    try:
        train = load_idx_dataset(d.train_images, d.train_labels, "train", d.n_classes, d.downsample, d.train_limit)
        test = load_idx_dataset(d.test_images, d.test_labels, "test", d.n_classes, d.downsample, d.test_limit)
        ood = {name: load_idx_dataset(o.images, None, name, None, d.downsample, o.limit, is_ood=True)
               for name, o in d.ood.items()}
    except FileNotFoundError as exc:
        raise ConfigError(f"missing data file: {exc.filename}") from exc
    return Datasets(train=train, test=test, ood=ood, image_shape=train.image_shape)
