"""Stage 1: split a frozen source model's feature map into two parts.

The disentangler is a pair of independent 1x1-convolutional heads over the
same input map. Three losses shape the split:

* a dispersion term pushing the spatial profiles of the two parts apart
  (exponentiated MMD),
* a reconstruction term requiring the parts to sum back to the original map,
* a cross-entropy term on the positive part's channel profile, which is what
  breaks the symmetry between the heads and makes "positive" mean
  "useful for the target task".

The auxiliary classifier exists only during this stage; fine-tuning later
consumes the trained heads and discards it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.utils.data import DataLoader, Dataset

from .errors import DivergenceError, InvalidInputError, ShapeMismatchError
from .features import FeatureMap, reduce_channelwise, reduce_spatialwise
from .hashing import parameter_hash
from .mmd import KernelConfig, mmd_exp_loss

__all__ = [
    "LossWeights",
    "Disentangler",
    "AuxClassifier",
    "DisentanglerSchedule",
    "disentangle",
    "reconstruction_loss",
    "positive_ce_loss",
    "disentangler_total_loss",
    "train_disentangler",
    "save_disentangler",
    "load_disentangler",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the three stage-1 loss components."""

    lambda_di: float = 1e-2
    lambda_re: float = 1e-2
    lambda_ce: float = 1e-3

    def __post_init__(self) -> None:
        if min(self.lambda_di, self.lambda_re, self.lambda_ce) < 0:
            raise InvalidInputError("loss weights must be non-negative")


def _head(channels: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, hidden, kernel_size=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(hidden, channels, kernel_size=1),
    )


class Disentangler(nn.Module):
    """Two shape-preserving heads mapping (B, C, H, W) -> (B, C, H, W) each."""

    def __init__(self, channels: int, hidden_ratio: float = 0.5,
                 loss_weights: LossWeights = LossWeights(),
                 kernel_cfg: KernelConfig = KernelConfig(),
                 layer_id: str = ""):
        super().__init__()
        if channels < 1:
            raise InvalidInputError("channels must be >= 1")
        if hidden_ratio <= 0:
            raise InvalidInputError("hidden_ratio must be positive")
        self.channels = channels
        self.hidden_ratio = hidden_ratio
        self.loss_weights = loss_weights
        self.kernel_cfg = kernel_cfg
        self.layer_id = layer_id
        hidden = max(1, round(channels * hidden_ratio))
        self.pos_head = _head(channels, hidden)
        self.neg_head = _head(channels, hidden)
        self._init_weights()

    def _init_weights(self) -> None:
        # symmetric small init; the CE term is what breaks head symmetry
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def ablate_mmd(self) -> bool:
        """True for the variant trained with the dispersion term disabled."""
        return self.loss_weights.lambda_di == 0.0

    def forward(self, fm_ori: Tensor) -> tuple[Tensor, Tensor]:
        if fm_ori.dim() != 4 or fm_ori.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"expected (B, {self.channels}, H, W), got {tuple(fm_ori.shape)}")
        return self.pos_head(fm_ori), self.neg_head(fm_ori)


class AuxClassifier(nn.Module):
    """Global pooling followed by one fully connected layer."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(channels, num_classes)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() == 4:
            x = reduce_spatialwise(x).data
        return self.fc(x)


def disentangle(fm_ori: FeatureMap | Tensor, state: Disentangler) -> tuple[FeatureMap, FeatureMap]:
    """Apply both heads, returning typed maps that share the input's shape."""
    data = fm_ori.data if isinstance(fm_ori, FeatureMap) else fm_ori
    layer_id = fm_ori.layer_id if isinstance(fm_ori, FeatureMap) else state.layer_id
    pos, neg = state(data)
    return FeatureMap(pos, layer_id), FeatureMap(neg, layer_id)


def _data(x) -> Tensor:
    return x.data if isinstance(x, FeatureMap) else x


def reconstruction_loss(pos, neg, ori, lambda_re: float) -> Tensor:
    """lambda_re * ||pos + neg - ori||^2, summed per example, batch-mean."""
    p, n, o = _data(pos), _data(neg), _data(ori)
    if not (p.shape == n.shape == o.shape):
        raise ShapeMismatchError(
            f"shape mismatch: {tuple(p.shape)}, {tuple(n.shape)}, {tuple(o.shape)}")
    if lambda_re < 0:
        raise InvalidInputError("lambda_re must be non-negative")
    residual = (p + n - o).flatten(1).pow(2).sum(dim=1)
    return lambda_re * residual.mean()


def positive_ce_loss(pos, labels: Tensor, clf: AuxClassifier, lambda_ce: float) -> Tensor:
    """lambda_ce * mean cross-entropy of the aux classifier on the positive part."""
    p = _data(pos)
    if lambda_ce < 0:
        raise InvalidInputError("lambda_ce must be non-negative")
    if labels.shape[0] != p.shape[0]:
        raise ShapeMismatchError("batch size of labels and features differ")
    if labels.numel() and (labels.min() < 0 or labels.max() >= clf.num_classes):
        raise InvalidInputError("label out of range for the auxiliary classifier")
    logits = clf(p)
    return lambda_ce * F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class Stage1Losses:
    di: float
    re: float
    ce: float
    total: float


def disentangler_total_loss(batch, source, state: Disentangler, clf: AuxClassifier,
                            kernel_cfg: KernelConfig | None = None):
    """Loss of one mini-batch: returns (total tensor, Stage1Losses breakdown).

    ``source`` is any adapter exposing ``features(x)``; its output is taken
    under ``no_grad`` so nothing flows back into the frozen model.
    """
    x, y = batch
    cfg = kernel_cfg if kernel_cfg is not None else state.kernel_cfg
    with torch.no_grad():
        fm_ori = source.features(x)
    pos, neg = state(fm_ori)
    w = state.loss_weights

    l_di = mmd_exp_loss(reduce_channelwise(pos).data, reduce_channelwise(neg).data,
                        w.lambda_di, cfg)
    l_re = reconstruction_loss(pos, neg, fm_ori, w.lambda_re)
    l_ce = positive_ce_loss(pos, y, clf, w.lambda_ce)
    total = l_di + l_re + l_ce
    breakdown = Stage1Losses(float(l_di), float(l_re), float(l_ce), float(total))
    return total, breakdown


@dataclass(frozen=True)
class DisentanglerSchedule:
    """Stage-1 optimization settings (adaptive-moment optimizer)."""

    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidInputError("schedule values must be positive")


def train_disentangler(dataset: Dataset, source, state: Disentangler, clf: AuxClassifier,
                       schedule: DisentanglerSchedule = DisentanglerSchedule(),
                       record_path: str | Path | None = None):
    """Optimize the heads and the auxiliary classifier over the target set.

    The source model is put in eval mode and its parameters are left
    untouched; only ``state`` and ``clf`` receive updates. Returns the
    trained state and the per-epoch loss history.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    source.eval()
    for p in source.parameters():
        p.requires_grad_(False)

    torch.manual_seed(schedule.seed)
    gen = torch.Generator().manual_seed(schedule.seed)
    loader = DataLoader(dataset, batch_size=schedule.batch_size, shuffle=True,
                        generator=gen, num_workers=0)
    opt = torch.optim.Adam(list(state.parameters()) + list(clf.parameters()),
                           lr=schedule.lr)

    history: list[dict] = []
    for epoch in range(schedule.epochs):
        state.train()
        clf.train()
        sums = {"di": 0.0, "re": 0.0, "ce": 0.0, "total": 0.0}
        n_batches = 0
        for step, batch in enumerate(loader):
            opt.zero_grad()
            total, parts = disentangler_total_loss(batch, source, state, clf)
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite stage-1 loss at epoch {epoch}, step {step}: {parts}")
            total.backward()
            opt.step()
            for key, val in (("di", parts.di), ("re", parts.re), ("ce", parts.ce),
                             ("total", parts.total)):
                sums[key] += val
            n_batches += 1
        means = {k: v / n_batches for k, v in sums.items()}
        means["epoch"] = epoch
        history.append(means)
        log.info("stage1 epoch %d: di=%.4g re=%.4g ce=%.4g total=%.4g",
                 epoch, means["di"], means["re"], means["ce"], means["total"])

    if record_path is not None:
        Path(record_path).parent.mkdir(parents=True, exist_ok=True)
        with open(record_path, "w") as f:
            json.dump(history, f, indent=2, sort_keys=True)
    return state, history


def save_disentangler(path: str | Path, state: Disentangler, clf: AuxClassifier | None = None,
                      extra: dict | None = None) -> dict:
    """Write checkpoint plus a JSON sidecar manifest (`<path>.json`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": state.state_dict(),
        "channels": state.channels,
        "hidden_ratio": state.hidden_ratio,
        "loss_weights": asdict(state.loss_weights),
        "kernel_cfg": asdict(state.kernel_cfg),
        "layer_id": state.layer_id,
    }
    if clf is not None:
        payload["clf_state_dict"] = clf.state_dict()
        payload["num_classes"] = clf.num_classes
    torch.save(payload, path)
    manifest = {
        "layer_id": state.layer_id,
        "channels": state.channels,
        "hidden_ratio": state.hidden_ratio,
        "lambda_di": state.loss_weights.lambda_di,
        "lambda_re": state.loss_weights.lambda_re,
        "lambda_ce": state.loss_weights.lambda_ce,
        "ablate_mmd": state.ablate_mmd,
        "content_hash": parameter_hash(state),
    }
    if extra:
        manifest.update(extra)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_disentangler(path: str | Path):
    """Inverse of :func:`save_disentangler`; returns (state, clf-or-None)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    state = Disentangler(
        channels=payload["channels"],
        hidden_ratio=payload["hidden_ratio"],
        loss_weights=LossWeights(**payload["loss_weights"]),
        kernel_cfg=KernelConfig(**payload["kernel_cfg"]),
        layer_id=payload["layer_id"],
    )
    state.load_state_dict(payload["state_dict"])
    clf = None
    if "clf_state_dict" in payload:
        clf = AuxClassifier(payload["channels"], payload["num_classes"])
        clf.load_state_dict(payload["clf_state_dict"])
    return state, clf
