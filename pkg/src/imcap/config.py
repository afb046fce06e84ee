"""Run configuration: training hyperparameters, architecture options and dataset paths.

Run configs are JSON documents; unknown keys are rejected at every level.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .models import ADAPTER_KINDS, DECODER_KINDS, DTYPES, ConfigError

BATCH_SIZES = (64, 128)
LEARNING_RATES = (1e-3, 5e-4)
EMBED_SIZES = (256, 512)
NUM_LAYERS = (1, 2, 4)
PAPER_GRID = {
    "batch_size": list(BATCH_SIZES),
    "learning_rate": list(LEARNING_RATES),
    "embed_size": list(EMBED_SIZES),
    "num_layers": list(NUM_LAYERS),
}
GRID_FIELDS = tuple(PAPER_GRID)

OUTPUT_ROOT_ENV = "IMCAP_OUTPUT_ROOT"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


def _from_dict(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    embed_size: int = 256
    num_layers: int = 1
    epochs: int = 50
    optimizer: str = "adam"
    seed: int = 0
    max_len: int = 30
    eval_method: str = "beam3"  # method for the final epoch and every `beam_every` epochs
    beam_every: int = 5
    val_every: int = 1
    min_count: int = 5
    grad_clip: float = 5.0
    dtype: str = "float32"
    reference_sampling: str = "uniform"  # "first" pins the first reference (memorization runs)
    split: str = "standard"  # "all" trains and validates on every image
    condition_on_image: bool = True  # False zeroes the features: unconditioned language-model baseline
    allow_off_grid: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.eval_method not in ("greedy", "beam3"):
            raise ConfigError("eval_method must be 'greedy' or 'beam3'")
        if self.reference_sampling not in ("uniform", "first"):
            raise ConfigError("reference_sampling must be 'uniform' or 'first'")
        if self.split not in ("standard", "all"):
            raise ConfigError("split must be 'standard' or 'all'")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.max_len < 2 or self.min_count < 1 or self.beam_every < 1 or self.val_every < 1:
            raise ConfigError("max_len >= 2, min_count >= 1, beam_every >= 1 and val_every >= 1 required")
        if self.batch_size < 1 or self.learning_rate < 0 or self.embed_size < 1 or self.num_layers < 1:
            raise ConfigError("batch_size, embed_size, num_layers must be positive; learning_rate >= 0")
        if not self.allow_off_grid:
            for name, grid in PAPER_GRID.items():
                if getattr(self, name) not in grid:
                    raise ConfigError(f"{name}={getattr(self, name)} outside grid {grid} "
                                      "(set allow_off_grid for exploratory runs)")


@dataclass(frozen=True)
class ArchitectureOptions:
    decoder_kind: str = "transformer"
    adapter_kind: str = "single"
    num_heads: int = 0
    ffn_size: int = 0
    dropout: float = 0.1
    max_boxes: int = 16
    num_classes: int = 0

    def __post_init__(self):
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter_kind must be one of {ADAPTER_KINDS}")


@dataclass(frozen=True)
class DatasetPaths:
    captions: str
    features: tuple[str, ...] = ()
    permissive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not 1 <= len(self.features) <= 2:
            raise ConfigError("dataset.features must list one or two feature files")


@dataclass(frozen=True)
class RunConfig:
    name: str
    dataset: DatasetPaths
    architecture: ArchitectureOptions = field(default_factory=ArchitectureOptions)
    training: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = field(default_factory=default_output_root)

    def __post_init__(self):
        if not self.name or "/" in self.name or self.name in (".", ".."):
            raise ConfigError("name must be a non-empty path component")
        streams = 2 if self.architecture.adapter_kind == "stacked" else 1
        if len(self.dataset.features) != streams:
            raise ConfigError(f"adapter {self.architecture.adapter_kind!r} needs {streams} feature file(s)")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def with_training(self, **changes) -> "RunConfig":
        return replace(self, training=replace(self.training, **changes))

    def to_json(self) -> dict:
        out = asdict(self)
        out["dataset"]["features"] = list(self.dataset.features)
        return out

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path | None = None) -> "RunConfig":
        """Parse a run config; relative dataset and output paths resolve against ``base_dir``."""
        if not isinstance(obj, dict):
            raise ConfigError("run config must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"run config: unknown keys {unknown}")
        if "name" not in obj or "dataset" not in obj:
            raise ConfigError("run config needs 'name' and 'dataset'")
        ds = dict(obj["dataset"]) if isinstance(obj["dataset"], dict) else obj["dataset"]
        if base_dir is not None and isinstance(ds, dict):
            base = Path(base_dir)
            if "captions" in ds:
                ds["captions"] = str(base / ds["captions"])
            ds["features"] = [str(base / p) for p in ds.get("features", [])]
        kwargs = {
            "name": obj["name"],
            "dataset": _from_dict(DatasetPaths, ds, "dataset"),
            "architecture": _from_dict(ArchitectureOptions, obj.get("architecture", {}), "architecture"),
            "training": _from_dict(TrainConfig, obj.get("training", {}), "training"),
        }
        if "output_dir" in obj:
            out = Path(str(obj["output_dir"]))
            kwargs["output_dir"] = str(Path(base_dir) / out if base_dir is not None and not out.is_absolute() else out)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj, base_dir=path.parent)
