"""Seeded training loop, SGD with momentum, evaluation, and multi-run aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, Dataset, augment_batch
from .errors import ConfigError, TrainingDiverged
from .models import Model, ModelSpec, build, forward
from .regularizers import DropConfig
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[float] = field(default_factory=lambda: [0.5, 0.75])
    gamma: float = 0.1
    nesterov: bool = False
    seed: int = 0
    runs: int = 5
    eval_batch_size: int = 256

    def __post_init__(self):
        self.milestones = [float(m) for m in self.milestones]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError("lr", f"must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if any(not 0 <= m <= 1 for m in self.milestones):
            raise ConfigError("milestones", f"are fractions of the run and must lie in [0, 1], got {self.milestones}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma", f"must be in (0, 1], got {self.gamma}")
        if self.seed < 0:
            raise ConfigError("seed", f"must be >= 0, got {self.seed}")
        if self.runs < 1:
            raise ConfigError("runs", f"must be >= 1, got {self.runs}")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", f"must be >= 1, got {self.eval_batch_size}")

    def milestone_epochs(self) -> list[int]:
        return sorted(int(round(m * self.epochs)) for m in self.milestones)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``gamma`` once per milestone reached (epochs count from 0)."""
        drops = sum(1 for m in self.milestone_epochs() if epoch >= m)
        return self.lr * self.gamma**drops


@dataclass
class RunMetrics:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    test_error: list[float] = field(default_factory=list)
    final_error: float = float("nan")
    seconds: float = 0.0
    dropped_fraction: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_error"])
        for e, (loss, err) in enumerate(zip(self.train_loss, self.test_error), start=1):
            w.writerow([e, repr(loss), repr(err)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class Aggregate:
    mean: float
    std: float
    finals: list[float]

    def cell(self) -> str:
        return format_cell(self.mean, self.std)


def format_cell(mean: float, std: float) -> str:
    """Percent with two decimals, e.g. ``0.2193, 0.0007 -> "21.93 ± 0.07"``."""
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


class SGD:
    """SGD with heavy-ball (optionally Nesterov) momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr(epoch) * v``.
    """

    def __init__(self, params: Sequence[tuple[str, T.Tensor]], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, epoch: int) -> None:
        cfg = self.cfg
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        for name, p in self.params:
            if p.grad is None:
                continue
            f = p.dtype.type
            g = p.grad + f(cfg.weight_decay) * p.data if cfg.weight_decay else p.grad
            v = self.velocity[name]
            v *= f(cfg.momentum)
            v += g
            update = g + f(cfg.momentum) * v if cfg.nesterov else v
            p.data -= f(cfg.lr_at(epoch)) * update


def sgd_step(params, cfg: TrainConfig, epoch: int, state: Optional[SGD] = None) -> SGD:
    """One optimizer step; pass the returned state back in to keep momentum."""
    opt = state or SGD(params, cfg)
    opt.step(epoch)
    return opt


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-misclassified examples, computed in eval mode."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    wrong = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            xb = dataset.images[start : start + batch_size]
            logits = forward(model, xb, "eval")
            wrong += int(np.count_nonzero(logits.data.argmax(axis=1) != dataset.labels[start : start + batch_size]))
    return wrong / len(dataset)


def train_run(
    spec: ModelSpec,
    cfg: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    rng: Rng,
    policy: Optional[AugmentPolicy] = None,
    drop: Optional[DropConfig] = None,
    seed: Optional[int] = None,
    model: Optional[Model] = None,
) -> RunMetrics:
    """Train one model from scratch and record per-epoch loss and test error.

    Streams: ``init`` for weights, ``epoch{e}`` for shuffling/augmentation,
    and ``epoch{e}/batch{b}`` for in-network regularizers.
    """
    t0 = time.perf_counter()
    model = model or build(spec, rng)
    opt = SGD(model.params, cfg)
    metrics = RunMetrics(seed=rng.seed if seed is None else seed)
    n = len(train_set)
    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch{epoch}")
        order = erng.permutation(n)
        total, count, dropped = 0.0, 0, []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # BN needs two samples
            xb = train_set.images[idx]
            if policy is not None:
                xb = augment_batch(xb, policy, erng, drop)
            model.zero_grad()
            logits = forward(model, xb, "train", erng.split(f"batch{b}"))
            loss = T.softmax_cross_entropy(logits, train_set.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch + 1}, batch {b}")
            T.backward(loss)
            try:
                opt.step(epoch)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch + 1}, batch {b}") from None
            total += value * len(idx)
            count += len(idx)
            dropped.extend(r.dropped_fraction for r in model.mask_reports().values())
        metrics.train_loss.append(total / max(count, 1))
        metrics.test_error.append(evaluate(model, test_set, cfg.eval_batch_size))
        metrics.dropped_fraction.append(float(np.mean(dropped)) if dropped else 0.0)
        log.info("epoch %d: loss %.4f, test error %.4f", epoch + 1, metrics.train_loss[-1], metrics.test_error[-1])
    metrics.final_error = metrics.test_error[-1] if metrics.test_error else evaluate(model, test_set, cfg.eval_batch_size)
    metrics.seconds = time.perf_counter() - t0
    return metrics


def aggregate_runs(metrics: Sequence[RunMetrics]) -> Aggregate:
    """Mean and population standard deviation of the final error rates."""
    if not metrics:
        raise ValueError("aggregate_runs: need at least one run")
    finals = [m.final_error for m in metrics]
    arr = np.asarray(finals, dtype=np.float64)
    return Aggregate(float(arr.mean()), float(arr.std()), finals)
