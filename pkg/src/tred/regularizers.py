"""The regularizer zoo: none, L2, L2-SP, AT, DELTA, BSS and the
disentangled-reference penalty, all behind one config type.

Parameter penalties (L2, L2-SP) act on weight vectors; feature penalties
(AT, DELTA, disentangled-reference) act on transfer-layer feature maps and
use batch-mean reduction so strengths transfer across batch sizes; the
spectral penalty (BSS) acts on the batch feature matrix. Reference inputs
(source feature maps, disentangled positive maps) are detached inside each
penalty, so gradients can only reach the target model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidInputError, NumericalError, ShapeMismatchError
from .features import FeatureMap, FeatureMatrix, attention_map, reduce_spatialwise

__all__ = [
    "REGULARIZER_KINDS",
    "RegularizerConfig",
    "ChannelWeights",
    "l2_penalty",
    "l2sp_penalty",
    "at_penalty",
    "delta_channel_weights",
    "delta_penalty",
    "bss_penalty",
    "tred_penalty",
    "save_channel_weights",
    "load_channel_weights",
]

log = logging.getLogger(__name__)

REGULARIZER_KINDS = ("none", "l2", "l2sp", "at", "delta", "bss", "tred")


@dataclass(frozen=True)
class ChannelWeights:
    """Per-channel penalty weights: non-negative, summing to one."""

    w: Tensor
    layer_id: str = ""
    probe_hash: str = ""

    def __post_init__(self) -> None:
        if self.w.dim() != 1:
            raise InvalidInputError("channel weights must be a 1-d vector")
        if (self.w < 0).any():
            raise InvalidInputError("channel weights must be non-negative")
        if abs(float(self.w.sum()) - 1.0) > 1e-6:
            raise InvalidInputError("channel weights must sum to 1")


@dataclass(frozen=True)
class RegularizerConfig:
    """Discriminated choice of regularizer plus its strength knobs.

    ``alpha`` scales the method-specific penalty (parameter distance,
    feature distance or spectral term); ``beta`` is the weight decay applied
    to the fresh task head (for plain L2 it is the decay of the whole
    parameter vector). ``k`` is the number of smallest singular values the
    spectral penalty covers.
    """

    kind: str = "none"
    alpha: float = 0.0
    beta: float = 0.0
    k: int = 1
    channel_weights: ChannelWeights | None = None

    def __post_init__(self) -> None:
        if self.kind not in REGULARIZER_KINDS:
            raise InvalidInputError(
                f"unknown regularizer {self.kind!r}; expected one of {REGULARIZER_KINDS}")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("alpha and beta must be non-negative")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")


def _param_list(params) -> list[Tensor]:
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def l2_penalty(params, beta: float) -> Tensor:
    """(beta/2) * sum of squared weights."""
    ps = _param_list(params)
    if not ps:
        return torch.zeros(())
    total = sum(p.pow(2).sum() for p in ps)
    return 0.5 * beta * total


def l2sp_penalty(omega_s, omega_s0, omega_head, alpha: float, beta: float) -> Tensor:
    """Starting-point penalty: (alpha/2)||w_s - w_s0||^2 + (beta/2)||w_head||^2."""
    ws, ws0 = _param_list(omega_s), _param_list(omega_s0)
    if len(ws) != len(ws0) or any(a.shape != b.shape for a, b in zip(ws, ws0)):
        raise ShapeMismatchError("current and starting-point parameters are not congruent")
    sp = sum((a - b.detach()).pow(2).sum() for a, b in zip(ws, ws0))
    if not ws:
        sp = torch.zeros(())
    return 0.5 * alpha * sp + l2_penalty(omega_head, beta)


def _fm_pair(fm_target, fm_source) -> tuple[Tensor, Tensor]:
    t = fm_target.data if isinstance(fm_target, FeatureMap) else fm_target
    s = fm_source.data if isinstance(fm_source, FeatureMap) else fm_source
    if t.shape != s.shape:
        raise ShapeMismatchError(f"feature maps differ in shape: {tuple(t.shape)} vs {tuple(s.shape)}")
    return t, s.detach()


def at_penalty(fm_target, fm_source, alpha: float) -> Tensor:
    """(alpha/2) * batch-mean squared distance between attention maps."""
    t, s = _fm_pair(fm_target, fm_source)
    diff = attention_map(t).data - attention_map(s).data
    return 0.5 * alpha * diff.pow(2).sum(dim=1).mean()


def delta_penalty(fm_target, fm_source, weights: ChannelWeights, alpha: float) -> Tensor:
    """Channel-weighted feature distance: (alpha/2) * sum_j W_j * batch-mean ||diff_j||^2."""
    t, s = _fm_pair(fm_target, fm_source)
    if weights.w.numel() != t.shape[1]:
        raise ShapeMismatchError(
            f"{weights.w.numel()} channel weights for {t.shape[1]} channels")
    # per-channel squared distance, summed over the spatial grid, batch-mean
    per_channel = (t - s).pow(2).sum(dim=(2, 3)).mean(dim=0)
    w = weights.w.to(per_channel.dtype)
    return 0.5 * alpha * (w * per_channel).sum()


def tred_penalty(fm_target, fm_pos, alpha: float) -> Tensor:
    """(alpha/2) * batch-mean squared distance to the disentangled positive part.

    ``fm_pos`` is detached: the frozen source model and disentangler never
    receive gradient through this term.
    """
    t, pos = _fm_pair(fm_target, fm_pos)
    return 0.5 * alpha * (t - pos).pow(2).flatten(1).sum(dim=1).mean()


def bss_penalty(features, k: int = 1, alpha: float = 1.0) -> Tensor:
    """Penalize the k smallest singular values: alpha * sum sigma_i^2.

    If the decomposition fails to converge, 1e-8-scaled jitter is added and
    the decomposition retried once before giving up.
    """
    a = features.data if isinstance(features, FeatureMatrix) else features
    if a.dim() != 2:
        raise InvalidInputError(f"feature matrix must be 2-d, got {tuple(a.shape)}")
    if k > min(a.shape):
        raise InvalidInputError(f"k={k} exceeds min(b, d)={min(a.shape)}")
    try:
        sigma = torch.linalg.svdvals(a)
    except Exception:  # noqa: BLE001 - LinAlgError or backend failure
        log.warning("SVD failed for BSS penalty; retrying with jitter")
        try:
            sigma = torch.linalg.svdvals(a + 1e-8 * torch.randn_like(a))
        except Exception as exc:  # noqa: BLE001
            raise NumericalError("SVD failed twice for BSS penalty") from exc
    # svdvals returns descending order; the last k are the smallest
    return alpha * sigma[-k:].pow(2).sum()


def delta_channel_weights(source, probe_data, seed: int = 0,
                          max_iter: int = 1000, tol: float = 1e-8,
                          batch_size: int = 64) -> ChannelWeights:
    """Per-channel importance from a frozen-feature linear probe.

    A multinomial logistic probe is fit on globally pooled source features
    of the probe set; each channel's weight is the softmax of the log-loss
    increase observed when that channel's activation is zeroed at probe
    evaluation time. The probe objective is strictly convex, so the result
    is deterministic and equivariant under channel permutation.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import log_loss

    from torch.utils.data import DataLoader

    if len(probe_data) == 0:
        raise InvalidInputError("empty probe set")
    del seed  # probe fitting is deterministic; kept for interface stability

    source.eval()
    feats, labels = [], []
    loader = DataLoader(probe_data, batch_size=batch_size, shuffle=False, num_workers=0)
    with torch.no_grad():
        for x, y in loader:
            feats.append(reduce_spatialwise(source.features(x)).data.double())
            labels.append(y)
    x_np = torch.cat(feats).numpy()
    y_np = torch.cat(labels).numpy()
    classes = np.unique(y_np)
    if classes.size < 2:
        raise InvalidInputError("probe set must contain at least 2 classes")

    import hashlib
    probe_hash = hashlib.sha256(x_np.tobytes() + y_np.tobytes()).hexdigest()[:16]

    probe = LogisticRegression(max_iter=max_iter, tol=tol)
    probe.fit(x_np, y_np)
    base = log_loss(y_np, probe.predict_proba(x_np), labels=classes)

    n_channels = x_np.shape[1]
    drops = np.empty(n_channels)
    for j in range(n_channels):
        x_mask = x_np.copy()
        x_mask[:, j] = 0.0
        drops[j] = log_loss(y_np, probe.predict_proba(x_mask), labels=classes) - base

    w = torch.softmax(torch.from_numpy(drops), dim=0)
    layer_id = getattr(source, "transfer_layer_id", "")
    return ChannelWeights(w, layer_id=layer_id, probe_hash=probe_hash)


def save_channel_weights(path: str | Path, weights: ChannelWeights) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "layer_id": weights.layer_id,
        "probe_hash": weights.probe_hash,
        "weights": [float(v) for v in weights.w],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_channel_weights(path: str | Path) -> ChannelWeights:
    with open(path) as f:
        payload = json.load(f)
    return ChannelWeights(torch.tensor(payload["weights"], dtype=torch.float64),
                          layer_id=payload["layer_id"], probe_hash=payload["probe_hash"])
