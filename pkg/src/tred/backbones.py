"""Concrete model adapters: a small residual family for 32x32 inputs plus a
passthrough adapter for feature-level experiments, and a from-scratch
pretraining routine that stands in for large-scale source checkpoints.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import torch
from torch import Tensor, nn
from torch.utils.data import Dataset

from .errors import ConfigError, InvalidInputError
from .finetune import TrainingSchedule, evaluate, learning_rate_at, srm_step
from .hashing import config_hash, parameter_hash
from .regularizers import RegularizerConfig

__all__ = [
    "BackboneSpec",
    "SmallResNet",
    "IdentityAdapter",
    "build_backbone",
    "pretrain_source",
    "save_adapter",
    "load_adapter",
]

log = logging.getLogger(__name__)

_STAGE_IDS = ("stage1", "stage2", "stage3", "stage4")


@dataclass(frozen=True)
class BackboneSpec:
    """Small residual net family: 4 stages of doubling width.

    ``blocks_per_stage=2`` gives the 18-layer-class member; 1 gives the
    10-layer member, which trains in minutes on a CPU.
    """

    arch: str = "small-resnet"
    base_width: int = 16
    blocks_per_stage: int = 2
    num_source_classes: int = 10
    transfer_layer_id: str = "stage4"
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.arch != "small-resnet":
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.transfer_layer_id not in _STAGE_IDS:
            raise ConfigError(
                f"transfer layer {self.transfer_layer_id!r} not in graph {_STAGE_IDS}")
        if self.base_width < 1 or self.blocks_per_stage < 1 or self.num_source_classes < 1:
            raise ConfigError("width, depth and class count must be positive")


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: Tensor) -> Tensor:
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class SmallResNet(nn.Module):
    """Residual classifier exposing the adapter interface.

    Parameters partition into the backbone (stem + stages) and the task
    head (one fully connected layer after global pooling); the partition is
    total and disjoint by construction.
    """

    def __init__(self, spec: BackboneSpec, num_classes: int | None = None):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes if num_classes is not None else spec.num_source_classes
        self.transfer_layer_id = spec.transfer_layer_id
        w = spec.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 3, 1, 1, bias=False),
            nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        widths = [w, 2 * w, 4 * w, 8 * w]
        strides = [1, 2, 2, 2]
        cin = w
        self.stages = nn.ModuleDict()
        for sid, cout, stride in zip(_STAGE_IDS, widths, strides):
            blocks = []
            for b in range(spec.blocks_per_stage):
                blocks.append(BasicBlock(cin, cout, stride if b == 0 else 1))
                cin = cout
            self.stages[sid] = nn.Sequential(*blocks)
        self.feature_channels = widths[_STAGE_IDS.index(spec.transfer_layer_id)]
        self.fc = nn.Linear(widths[-1], self.num_classes)
        self._init_head()

    def _init_head(self) -> None:
        nn.init.normal_(self.fc.weight, std=1.0 / self.fc.in_features**0.5)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.stem(x)
        fm = None
        for sid in _STAGE_IDS:
            h = self.stages[sid](h)
            if sid == self.transfer_layer_id:
                fm = h
        logits = self.fc(h.mean(dim=(2, 3)))
        return logits, fm

    def features(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for sid in _STAGE_IDS:
            h = self.stages[sid](h)
            if sid == self.transfer_layer_id:
                return h
        raise ConfigError(f"transfer layer {self.transfer_layer_id!r} not reached")

    def backbone_parameters(self) -> Iterator[Tensor]:
        for name, p in self.named_parameters():
            if not name.startswith("fc."):
                yield p

    def head_parameters(self) -> Iterator[Tensor]:
        return iter(self.fc.parameters())

    def clone_for_target(self, num_classes: int) -> "SmallResNet":
        """Copy of the backbone with a fresh head for ``num_classes``.

        Head weights draw from the ambient torch RNG; seed it first.
        """
        target = SmallResNet(self.spec, num_classes)
        own = self.state_dict()
        backbone_state = {k: v.clone() for k, v in own.items() if not k.startswith("fc.")}
        missing = target.load_state_dict(backbone_state, strict=False)
        assert all(k.startswith("fc.") for k in missing.missing_keys)
        return target


class IdentityAdapter(nn.Module):
    """Adapter whose feature map is the input itself.

    Useful when experiments operate directly at feature-map level, e.g. the
    synthetic separability studies of the stage-1 dynamics.
    """

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        if channels < 1 or num_classes < 1:
            raise InvalidInputError("channels and num_classes must be positive")
        self.channels = channels
        self.feature_channels = channels
        self.num_classes = num_classes
        self.transfer_layer_id = "input"
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.fc(x.mean(dim=(2, 3))), x

    def features(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise InvalidInputError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        return x

    def backbone_parameters(self) -> Iterator[Tensor]:
        return iter(())

    def head_parameters(self) -> Iterator[Tensor]:
        return iter(self.fc.parameters())

    def clone_for_target(self, num_classes: int) -> "IdentityAdapter":
        return IdentityAdapter(self.channels, num_classes)


def build_backbone(spec: BackboneSpec, seed: int = 0) -> SmallResNet:
    """Deterministic construction: same spec and seed, same parameters."""
    torch.manual_seed(seed)
    return SmallResNet(spec)


def pretrain_source(spec: BackboneSpec, train_set: Dataset,
                    schedule: TrainingSchedule, eval_set: Dataset | None = None,
                    out_path: str | Path | None = None,
                    dataset_hash: str = "") -> tuple[SmallResNet, dict]:
    """Train the source model from scratch on the source task.

    Stands in for large-scale pretraining, which is far outside desk scale.
    Returns the model and a record with the training curve and final
    accuracy; optionally persists checkpoint + manifest.
    """
    if len(train_set) == 0:
        raise InvalidInputError("cannot pretrain on an empty dataset")
    model = build_backbone(spec, seed=schedule.seed)
    torch.manual_seed(schedule.seed)
    gen = torch.Generator().manual_seed(schedule.seed)
    loader = torch.utils.data.DataLoader(train_set, batch_size=schedule.batch_size,
                                         shuffle=True, generator=gen, num_workers=0)
    optimizer = torch.optim.SGD(model.parameters(), lr=schedule.base_lr,
                                momentum=schedule.momentum)
    none_reg = RegularizerConfig("none")
    curve = []
    for epoch in range(schedule.epochs):
        lr = learning_rate_at(schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        loss_sum, n = 0.0, 0
        for batch in loader:
            losses = srm_step(batch, model, None, none_reg, optimizer)
            loss_sum += losses.total
            n += 1
        entry = {"epoch": epoch, "train_loss": loss_sum / n, "lr": lr}
        if eval_set is not None:
            entry["eval_top1"] = evaluate(model, eval_set)
        curve.append(entry)
        log.info("pretrain epoch %d: loss=%.4f%s", epoch, entry["train_loss"],
                 f" top1={entry['eval_top1']:.2f}" if "eval_top1" in entry else "")
    final_acc = curve[-1].get("eval_top1", evaluate(model, train_set))
    record = {
        "spec": asdict(spec),
        "spec_hash": config_hash(asdict(spec)),
        "dataset_hash": dataset_hash,
        "curve": curve,
        "final_top1": final_acc,
        "seed": schedule.seed,
    }
    if out_path is not None:
        save_adapter(out_path, model, extra=record)
    return model, record


def save_adapter(path: str | Path, model: nn.Module, extra: dict | None = None) -> dict:
    """Serialize weights plus a JSON manifest (`<path>.json`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, SmallResNet):
        payload = {
            "adapter": "small-resnet",
            "spec": asdict(model.spec),
            "num_classes": model.num_classes,
            "state_dict": model.state_dict(),
        }
    elif isinstance(model, IdentityAdapter):
        payload = {
            "adapter": "identity",
            "channels": model.channels,
            "num_classes": model.num_classes,
            "state_dict": model.state_dict(),
        }
    else:
        raise ConfigError(f"cannot serialize adapter of type {type(model).__name__}")
    torch.save(payload, path)
    manifest = {"adapter": payload["adapter"], "num_classes": payload["num_classes"],
                "content_hash": parameter_hash(model)}
    if "spec" in payload:
        manifest["spec"] = payload["spec"]
    if extra:
        manifest.update(extra)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_adapter(path: str | Path) -> nn.Module:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload["adapter"] == "small-resnet":
        model = SmallResNet(BackboneSpec(**payload["spec"]), payload["num_classes"])
    elif payload["adapter"] == "identity":
        model = IdentityAdapter(payload["channels"], payload["num_classes"])
    else:
        raise ConfigError(f"unknown adapter kind {payload['adapter']!r}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
