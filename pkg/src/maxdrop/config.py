"""Experiment configuration files.

A config is one JSON document with a strict schema: unknown keys anywhere are
rejected, so two compared variants cannot silently drift apart.

.. code-block:: json

    {
      "name": "synth-resnet",
      "output_dir": "results/synth",
      "dataset": {"kind": "synthetic", "classes": 10, "side": 16},
      "model": {"family": "resnet-mini", "slot_assignment": {"*": "maxdropout"}},
      "train": {"epochs": 30, "runs": 5},
      "drop": {"r": 0.3},
      "augment": {"pad": 2, "crop": 16}
    }

Omitted keys take their dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import AugmentPolicy, Dataset, data_dir, load_cifar, normalize_per_channel, synth_dataset
from .errors import ConfigError
from .models import ModelSpec
from .regularizers import DropConfig
from .train import TrainConfig

DATASET_KINDS = ("synthetic", "cifar10")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    seed: int = 0
    classes: int = 10
    n_per_class: int = 40
    test_per_class: int = 20
    side: int = 16
    noise: float = 0.35
    max_shift: int = 3
    path: Optional[str] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError("kind", f"must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("classes", f"must be >= 2, got {self.classes}")
        if self.n_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("n_per_class", "n_per_class and test_per_class must be >= 1")
        if self.side < 1:
            raise ConfigError("side", f"must be >= 1, got {self.side}")

    def label(self) -> str:
        if self.kind == "synthetic":
            return f"synthetic-{self.classes}"
        return f"CIFAR-{self.classes}"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "results"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    drop: DropConfig = field(default_factory=DropConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        # the model's slots always use the experiment-level drop settings
        self.model.drop_config = self.drop
        if self.model.num_classes != self.dataset.classes:
            raise ConfigError("model.num_classes", f"{self.model.num_classes} does not match dataset.classes {self.dataset.classes}")
        side = self.dataset.side if self.dataset.kind == "synthetic" else 32
        try:
            self.augment.validate(side)
        except ConfigError as exc:
            raise ConfigError(f"augment.{exc.field}", str(exc).split(": ", 1)[1]) from None

    def to_dict(self) -> dict:
        model = {f.name: _plain(getattr(self.model, f.name)) for f in dataclasses.fields(ModelSpec) if f.name != "drop_config"}
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "dataset": _plain(self.dataset),
            "model": model,
            "train": _plain(self.train),
            "drop": _plain(self.drop),
            "augment": _plain(self.augment),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        """Hash of everything that affects results (name and output_dir excluded)."""
        d = self.to_dict()
        d.pop("name")
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data: Any, prefix: str, exclude: tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(known))})")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}.{exc.field}", str(exc).split(": ", 1)[1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from None


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "drop": DropConfig,
    "augment": AugmentPolicy,
}


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = {"name", "output_dir", *_SECTIONS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(allowed))})")
    kwargs: dict[str, Any] = {k: data[k] for k in ("name", "output_dir") if k in data}
    drop = _build(DropConfig, data.get("drop", {}), "drop")
    for key, cls in _SECTIONS.items():
        if key == "drop":
            kwargs[key] = drop
        elif key == "model":
            model = data.get("model", {})
            _reject_drop_config(model)
            if not isinstance(model, dict):
                raise ConfigError("model", f"expected an object, got {type(model).__name__}")
            kwargs[key] = _build(ModelSpec, {**model, "drop_config": drop}, "model")
        else:
            kwargs[key] = _build(cls, data.get(key, {}), key)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("<root>", str(exc)) from None


def _reject_drop_config(model: dict) -> None:
    if isinstance(model, dict) and "drop_config" in model:
        raise ConfigError("model.drop_config", "unknown key (regularizer settings live in the top-level 'drop' section)")


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def load_datasets(cfg: DatasetConfig, data_root: Optional[str] = None) -> tuple[Dataset, Dataset]:
    """Build the (train, test) pair, normalized with train statistics."""
    if cfg.kind == "synthetic":
        kw = dict(classes=cfg.classes, side=cfg.side, noise=cfg.noise, max_shift=cfg.max_shift)
        train = synth_dataset(cfg.seed, cfg.n_per_class, split="train", **kw)
        test = synth_dataset(cfg.seed, cfg.test_per_class, split="test", **kw)
    else:
        root = Path(cfg.path) if cfg.path else data_dir(data_root)
        if root is None:
            raise ConfigError("dataset.path", "CIFAR needs dataset.path, --data-dir, or MAXDROP_DATA_DIR")
        train = load_cifar(root, "train", cfg.classes, cfg.train_limit)
        test = load_cifar(root, "test", cfg.classes, cfg.test_limit)
    train = normalize_per_channel(train)
    test = normalize_per_channel(test, train.channel_stats)
    return train, test
