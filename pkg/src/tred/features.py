"""Feature-map tensor semantics: reductions, attention maps and flattening.

A feature map is the (B, C, H, W) activation tensor of a designated
convolutional layer. Everything downstream (the disentangler losses, the
feature-distance regularizers, the spectral diagnostics) consumes one of the
reduced views defined here, so the reduction conventions are fixed in this
module once and for all:

* spatial reduction  (B, C, H, W) -> (B, C)      mean over (h, w)
* channel reduction  (B, C, H, W) -> (B, H*W)    mean (or sum) over c
* flattening         (B, C, H, W) -> (B, C*H*W)  row-major

All operations are pure and differentiable through ``torch`` autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidInputError

__all__ = [
    "FeatureMap",
    "ChannelDescriptor",
    "SpatialDescriptor",
    "FeatureMatrix",
    "reduce_spatialwise",
    "reduce_channelwise",
    "attention_map",
    "flatten_features",
]


def _check_finite(data: Tensor, what: str) -> None:
    if not torch.isfinite(data).all():
        raise InvalidInputError(f"{what} contains non-finite entries")


def _as_4d(fm: "FeatureMap | Tensor", what: str = "feature map") -> Tensor:
    data = fm.data if isinstance(fm, FeatureMap) else fm
    if data.dim() != 4:
        raise InvalidInputError(f"{what} must be (B, C, H, W), got shape {tuple(data.shape)}")
    if min(data.shape) < 1:
        raise InvalidInputError(f"{what} has an empty dimension: {tuple(data.shape)}")
    _check_finite(data, what)
    return data


@dataclass(frozen=True)
class FeatureMap:
    """A (B, C, H, W) activation tensor tagged with its producing layer."""

    data: Tensor
    layer_id: str = ""

    def __post_init__(self) -> None:
        _as_4d(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class ChannelDescriptor:
    """Per-example channel profile, shape (B, C)."""

    data: Tensor
    layer_id: str = ""

    def __post_init__(self) -> None:
        if self.data.dim() != 2:
            raise InvalidInputError(f"channel descriptor must be (B, C), got {tuple(self.data.shape)}")
        _check_finite(self.data, "channel descriptor")


@dataclass(frozen=True)
class SpatialDescriptor:
    """Per-example spatial profile, shape (B, H*W), row-major over (h, w)."""

    data: Tensor
    layer_id: str = ""

    def __post_init__(self) -> None:
        if self.data.dim() != 2:
            raise InvalidInputError(f"spatial descriptor must be (B, H*W), got {tuple(self.data.shape)}")
        _check_finite(self.data, "spatial descriptor")


@dataclass(frozen=True)
class FeatureMatrix:
    """Batch feature matrix (b rows, d flattened feature columns)."""

    data: Tensor
    layer_id: str = ""

    def __post_init__(self) -> None:
        if self.data.dim() != 2 or min(self.data.shape) < 1:
            raise InvalidInputError(f"feature matrix must be (b, d), b,d >= 1, got {tuple(self.data.shape)}")
        _check_finite(self.data, "feature matrix")


def reduce_spatialwise(fm: FeatureMap | Tensor) -> ChannelDescriptor:
    """Collapse the spatial grid: out[b, c] = mean_{h,w} fm[b, c, h, w]."""
    data = _as_4d(fm)
    layer_id = fm.layer_id if isinstance(fm, FeatureMap) else ""
    return ChannelDescriptor(data.mean(dim=(2, 3)), layer_id)


def reduce_channelwise(fm: FeatureMap | Tensor, mode: str = "mean") -> SpatialDescriptor:
    """Collapse channels: out[b, h*W + w] = mean_c fm[b, c, h, w].

    ``mode="sum"`` switches the channel aggregation to a plain sum; the mean
    keeps magnitudes comparable across layer widths, which stabilizes the
    MMD bandwidth heuristic downstream.
    """
    data = _as_4d(fm)
    layer_id = fm.layer_id if isinstance(fm, FeatureMap) else ""
    if mode == "mean":
        red = data.mean(dim=1)
    elif mode == "sum":
        red = data.sum(dim=1)
    else:
        raise InvalidInputError(f"unknown channel reduction mode {mode!r}")
    return SpatialDescriptor(red.flatten(1), layer_id)


def attention_map(fm: FeatureMap | Tensor) -> SpatialDescriptor:
    """L2-normalized spatial energy map: normalize(vec(sum_c fm[b, c]^2)).

    An all-zero energy map is returned as the zero vector rather than
    dividing by zero.
    """
    data = _as_4d(fm)
    layer_id = fm.layer_id if isinstance(fm, FeatureMap) else ""
    energy = data.pow(2).sum(dim=1).flatten(1)
    norm = energy.norm(dim=1, keepdim=True)
    out = energy / norm.clamp_min(torch.finfo(energy.dtype).tiny)
    # rows with exactly zero energy stay zero: 0 / tiny == 0
    return SpatialDescriptor(out, layer_id)


def flatten_features(fm: FeatureMap | Tensor) -> FeatureMatrix:
    """Row b is the row-major flattening of fm[b]; shape (B, C*H*W)."""
    data = _as_4d(fm)
    layer_id = fm.layer_id if isinstance(fm, FeatureMap) else ""
    return FeatureMatrix(data.flatten(1), layer_id)
