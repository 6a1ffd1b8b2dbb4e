"""Pipeline configuration: one YAML file, explicit seeds, no hidden state."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import InvalidConfigError
from .model import ModelConfig
from .training import TrainConfig

VARIANTS = ("plain", "permuted", "local-permuted", "foveated", "tabular")


@dataclass
class LatticeSection:
    upsample: int = 3
    rings: object = "default"  # "default" or [[eccentricity, count, phase], ...]
    sigma0: float = 1.0
    gamma: float | None = None  # None -> default exponential law
    include_center: bool = True


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # CIFAR binary path, .urlm, .csv, or "synthetic"
    variant: str = "plain"
    n_images: int | None = 1000
    labels: str | None = None  # labels CSV for tabular sources
    patch_size: int = 4  # local-permuted
    permute: bool = True  # foveated: also scramble kernel order
    downsample_factor: int | None = None  # plain/permuted: average-pool first
    grayscale: bool = False  # with downsample_factor: average channels
    lattice: LatticeSection = field(default_factory=LatticeSection)


@dataclass
class AffinitySection:
    bins: int = 16
    method: str = "mi"  # mi | abs-correlation (debug)


@dataclass
class ClusteringSection:
    clusters: int = 64
    alpha: float = 0.0
    beta: float = 0.0
    method: str = "yu-shi"  # yu-shi | kmeans | patches | singleton
    restarts: int = 8


@dataclass
class EvalSection:
    protocol: str = "probe"  # probe | pair-decode | kfold
    train_fraction: float = 0.8
    l2: float = 1e-4
    max_epochs: int = 500
    folds: int = 5


@dataclass
class SeedsSection:
    synth: int = 0
    clustering: int = 0
    train: int = 0
    evaluation: int = 0
    split: int = 0


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    affinity: AffinitySection = field(default_factory=AffinitySection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output: str = "runs/out"

    def to_dict(self) -> dict:
        def section(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}

        out = {}
        for name in ("dataset", "affinity", "clustering", "model", "train", "eval", "seeds"):
            val = section(getattr(self, name))
            if name == "dataset":
                val["lattice"] = section(self.dataset.lattice)
            out[name] = val
        out["output"] = self.output
        return out

    def validate(self) -> None:
        ds = self.dataset
        if ds.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {ds.variant!r}; expected one of {VARIANTS}")
        if ds.source != "synthetic" and not Path(ds.source).exists():
            raise InvalidConfigError(f"dataset source {ds.source!r} does not exist")
        if ds.variant == "tabular":
            if ds.source == "synthetic":
                raise InvalidConfigError("tabular variant needs a file source")
            if ds.labels is None and not ds.source.endswith(".urlm"):
                raise InvalidConfigError("tabular variant needs a labels CSV")
            if ds.labels is not None and not Path(ds.labels).exists():
                raise InvalidConfigError(f"labels file {ds.labels!r} does not exist")
        if ds.variant == "foveated" and ds.lattice.upsample < 1:
            raise InvalidConfigError("lattice upsample factor must be >= 1")
        if self.clustering.method == "patches" and ds.variant != "local-permuted":
            raise InvalidConfigError("clustering method 'patches' requires the local-permuted variant")
        if self.clustering.alpha != 0.0 and ds.variant != "foveated":
            raise InvalidConfigError("alpha != 0 needs eccentricities (foveated variant)")
        if not 0.0 < self.eval.train_fraction < 1.0:
            raise InvalidConfigError("train_fraction must lie in (0, 1)")


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path) -> PipelineConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> PipelineConfig:
    known = {"dataset", "affinity", "clustering", "model", "train", "eval", "seeds", "output"}
    unknown = set(raw) - known
    if unknown:
        raise InvalidConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    ds_raw = dict(raw.get("dataset", {}))
    lattice = _build(LatticeSection, ds_raw.pop("lattice", {}), "dataset.lattice")
    dataset = _build(DatasetConfig, ds_raw, "dataset")
    dataset.lattice = lattice
    cfg = PipelineConfig(
        dataset=dataset,
        affinity=_build(AffinitySection, raw.get("affinity", {}), "affinity"),
        clustering=_build(ClusteringSection, raw.get("clustering", {}), "clustering"),
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        eval=_build(EvalSection, raw.get("eval", {}), "eval"),
        seeds=_build(SeedsSection, raw.get("seeds", {}), "seeds"),
        output=raw.get("output", "runs/out"),
    )
    cfg.train.seed = cfg.seeds.train
    return cfg


def override_seeds(cfg: PipelineConfig, seed: int) -> None:
    for f in fields(cfg.seeds):
        setattr(cfg.seeds, f.name, seed)
    cfg.train.seed = seed
