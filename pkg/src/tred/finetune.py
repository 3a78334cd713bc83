"""Stage 2: fine-tune a target model against any regularizer in the zoo.

One structural-risk step is ``cross-entropy + penalty``; the penalty is
selected by :class:`~tred.regularizers.RegularizerConfig`. Reference models
(the frozen source and, for the disentangled penalty, the frozen
disentangler) are consulted under ``no_grad`` and verified bit-identical
after training.

The model handle is duck-typed: anything satisfying :class:`ModelAdapter`
works (see ``tred.backbones`` for the concrete family).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from .errors import ConfigError, DivergenceError, InvalidInputError
from .features import flatten_features, reduce_spatialwise
from .hashing import parameter_hash
from .regularizers import (
    RegularizerConfig,
    at_penalty,
    bss_penalty,
    delta_penalty,
    l2_penalty,
    l2sp_penalty,
    tred_penalty,
)

__all__ = [
    "ModelAdapter",
    "TrainingSchedule",
    "StepLosses",
    "RunRecord",
    "srm_step",
    "finetune",
    "evaluate",
    "extract_features",
    "learning_rate_at",
    "MetricsWriter",
]

log = logging.getLogger(__name__)


@runtime_checkable
class ModelAdapter(Protocol):
    """Differentiable backbone handle: parameters split into a
    representation part and a task head, plus the designated transfer-layer
    feature map."""

    transfer_layer_id: str

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]: ...
    def features(self, x: Tensor) -> Tensor: ...
    def backbone_parameters(self) -> Iterator[Tensor]: ...
    def head_parameters(self) -> Iterator[Tensor]: ...
    def clone_for_target(self, num_classes: int) -> "ModelAdapter": ...


@dataclass(frozen=True)
class TrainingSchedule:
    """SGD schedule with a single step-decay event."""

    epochs: int = 40
    batch_size: int = 64
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay_epoch: int = 25
    lr_decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.base_lr <= 0:
            raise InvalidInputError("epochs, batch_size and base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.lr_decay_epoch > self.epochs:
            raise InvalidInputError("lr_decay_epoch must not exceed epochs")


def learning_rate_at(schedule: TrainingSchedule, epoch: int) -> float:
    """base_lr * factor^(epoch >= decay_epoch), exactly."""
    return schedule.base_lr * (schedule.lr_decay_factor if epoch >= schedule.lr_decay_epoch else 1.0)


@dataclass(frozen=True)
class StepLosses:
    ce: float
    penalty: float
    total: float


@dataclass
class RunRecord:
    """Persisted outcome of one fine-tuning run (or a seed aggregate)."""

    config_hash: str
    seeds: list[int]
    curves: dict[str, list[dict]] = field(default_factory=dict)
    final_top1: dict[str, float] = field(default_factory=dict)
    wall_clock_sec: float = 0.0

    def __post_init__(self) -> None:
        for acc in self.final_top1.values():
            if not 0.0 <= acc <= 100.0:
                raise InvalidInputError(f"accuracy {acc} outside [0, 100]")

    @property
    def accuracies(self) -> list[float]:
        return [self.final_top1[str(s)] for s in self.seeds if str(s) in self.final_top1]

    @property
    def mean_top1(self) -> float:
        accs = self.accuracies
        return sum(accs) / len(accs) if accs else float("nan")

    @property
    def std_top1(self) -> float:
        accs = self.accuracies
        if len(accs) < 2:
            return 0.0
        mu = self.mean_top1
        return (sum((a - mu) ** 2 for a in accs) / (len(accs) - 1)) ** 0.5

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "curves": self.curves,
            "final_top1": self.final_top1,
            "wall_clock_sec": self.wall_clock_sec,
            "mean_top1": self.mean_top1,
            "std_top1": self.std_top1,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        with open(path) as f:
            d = json.load(f)
        return cls(config_hash=d["config_hash"], seeds=d["seeds"], curves=d["curves"],
                   final_top1=d["final_top1"], wall_clock_sec=d["wall_clock_sec"])

    @classmethod
    def merge(cls, records: list["RunRecord"]) -> "RunRecord":
        if not records:
            raise InvalidInputError("nothing to merge")
        out = cls(config_hash=records[0].config_hash, seeds=[], curves={}, final_top1={},
                  wall_clock_sec=sum(r.wall_clock_sec for r in records))
        for rec in records:
            out.seeds.extend(rec.seeds)
            out.curves.update(rec.curves)
            out.final_top1.update(rec.final_top1)
        return out


class MetricsWriter:
    """Append-only JSON-lines stream, one object per optimization step."""

    def __init__(self, path: str | Path | None):
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a")

    def write(self, **fields) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def compute_penalty(x: Tensor, fm_target: Tensor, target, source,
                    reg: RegularizerConfig, dis=None) -> Tensor:
    """The regularization term of one batch, dispatched on ``reg.kind``.

    A weight-decay term on the fresh head accompanies every
    reference-based penalty, following the starting-point convention of
    keeping the task-specific parameters small.
    """
    kind = reg.kind
    if kind == "none":
        return fm_target.new_zeros(())
    if kind == "l2":
        return l2_penalty(list(target.parameters()), reg.beta)
    if kind == "l2sp":
        return l2sp_penalty(list(target.backbone_parameters()),
                            list(source.backbone_parameters()),
                            list(target.head_parameters()), reg.alpha, reg.beta)

    head_decay = l2_penalty(list(target.head_parameters()), reg.beta)
    if kind == "bss":
        return bss_penalty(flatten_features(fm_target), reg.k, reg.alpha) + head_decay
    if kind == "at":
        with torch.no_grad():
            fm_src = source.features(x)
        return at_penalty(fm_target, fm_src, reg.alpha) + head_decay
    if kind == "delta":
        if reg.channel_weights is None:
            raise ConfigError("DELTA requires channel weights (run the probe first)")
        with torch.no_grad():
            fm_src = source.features(x)
        return delta_penalty(fm_target, fm_src, reg.channel_weights, reg.alpha) + head_decay
    if kind == "tred":
        if dis is None:
            raise ConfigError("the disentangled-reference penalty requires a trained disentangler")
        with torch.no_grad():
            fm_pos, _ = dis(source.features(x))
        return tred_penalty(fm_target, fm_pos, reg.alpha) + head_decay
    raise ConfigError(f"unhandled regularizer kind {kind!r}")


def srm_step(batch, target, source, reg: RegularizerConfig, optimizer,
             dis=None) -> StepLosses:
    """One structural-risk-minimization update on the target parameters."""
    if reg.kind in ("l2sp", "at", "delta", "tred") and source is None:
        raise ConfigError(f"{reg.kind} requires the frozen source model")
    x, y = batch
    logits, fm_target = target(x)
    ce = F.cross_entropy(logits, y)
    penalty = compute_penalty(x, fm_target, target, source, reg, dis)
    total = ce + penalty
    if not torch.isfinite(total):
        raise DivergenceError(f"non-finite loss: ce={float(ce)}, penalty={float(penalty)}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return StepLosses(float(ce), float(penalty), float(total))


def finetune(train_set: Dataset, source, reg: RegularizerConfig,
             schedule: TrainingSchedule, dis=None, eval_set: Dataset | None = None,
             num_classes: int | None = None, metrics_path: str | Path | None = None,
             config_hash: str = "") -> tuple:
    """Run the stage-2 loop; returns (trained target adapter, RunRecord).

    The target starts from the source's backbone weights with a fresh head.
    Source and disentangler are frozen; their parameter hashes are checked
    unchanged afterwards.
    """
    if len(train_set) == 0:
        raise InvalidInputError("cannot fine-tune on an empty dataset")
    if num_classes is None:
        num_classes = getattr(train_set, "num_classes", None)
    if num_classes is None:
        raise ConfigError("num_classes is required when the dataset does not expose it")
    if reg.kind == "tred" and dis is None:
        raise ConfigError("the disentangled-reference penalty requires a trained disentangler")

    torch.manual_seed(schedule.seed)
    target = source.clone_for_target(num_classes)
    _freeze(source)
    hashes_before = {"source": parameter_hash(source)}
    if dis is not None:
        _freeze(dis)
        hashes_before["dis"] = parameter_hash(dis)

    gen = torch.Generator().manual_seed(schedule.seed)
    loader = DataLoader(train_set, batch_size=schedule.batch_size, shuffle=True,
                        generator=gen, num_workers=0)
    optimizer = torch.optim.SGD(target.parameters(), lr=schedule.base_lr,
                                momentum=schedule.momentum)
    metrics = MetricsWriter(metrics_path)

    t0 = time.time()
    curve: list[dict] = []
    for epoch in range(schedule.epochs):
        lr = learning_rate_at(schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        target.train()
        sums = {"ce": 0.0, "penalty": 0.0, "total": 0.0}
        n_batches = 0
        for step, batch in enumerate(loader):
            losses = srm_step(batch, target, source, reg, optimizer, dis)
            metrics.write(epoch=epoch, step=step, ce=losses.ce, penalty=losses.penalty,
                          total=losses.total, lr=lr)
            sums["ce"] += losses.ce
            sums["penalty"] += losses.penalty
            sums["total"] += losses.total
            n_batches += 1
        entry = {
            "epoch": epoch,
            "train_loss": sums["total"] / n_batches,
            "ce": sums["ce"] / n_batches,
            "penalty": sums["penalty"] / n_batches,
            "lr": lr,
        }
        if eval_set is not None:
            entry["eval_top1"] = evaluate(target, eval_set)
        curve.append(entry)
        log.info("epoch %d: loss=%.4f penalty=%.4g%s", epoch, entry["train_loss"],
                 entry["penalty"],
                 f" top1={entry['eval_top1']:.2f}" if "eval_top1" in entry else "")
    metrics.close()

    final_top1 = curve[-1]["eval_top1"] if eval_set is not None else evaluate(target, train_set)
    record = RunRecord(
        config_hash=config_hash,
        seeds=[schedule.seed],
        curves={str(schedule.seed): curve},
        final_top1={str(schedule.seed): final_top1},
        wall_clock_sec=time.time() - t0,
    )

    if parameter_hash(source) != hashes_before["source"]:
        raise RuntimeError("frozen source model was modified during fine-tuning")
    if dis is not None and parameter_hash(dis) != hashes_before["dis"]:
        raise RuntimeError("frozen disentangler was modified during fine-tuning")
    return target, record


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent; deterministic, no augmentation assumed."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    was_training = getattr(model, "training", False)
    model.eval()
    correct = total = 0
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)
    with torch.no_grad():
        for x, y in loader:
            logits, _ = model(x)
            correct += int((logits.argmax(dim=1) == y).sum())
            total += int(y.numel())
    if was_training:
        model.train()
    return 100.0 * correct / total


def extract_features(model, dataset: Dataset, batch_size: int = 128,
                     pooled: bool = False) -> tuple[Tensor, Tensor]:
    """Frozen transfer-layer features (and labels) for a whole dataset."""
    model.eval()
    feats, labels = [], []
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)
    with torch.no_grad():
        for x, y in loader:
            fm = model.features(x)
            feats.append(reduce_spatialwise(fm).data if pooled else fm)
            labels.append(y)
    return torch.cat(feats), torch.cat(labels)
