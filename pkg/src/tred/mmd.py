"""Gaussian-RBF maximum mean discrepancy and the exponentiated split loss.

The discrepancy between the positive and negative spatial profiles is the
signal that drives the two disentangler heads apart. Each row of a
descriptor matrix (one row per image in the mini-batch) is treated as one
sample of the distribution being compared.

The estimator is the biased V-statistic

    mmd2 = mean k(x_i, x_j) + mean k(y_i, y_j) - 2 mean k(x_i, y_j)

with all i = j terms included, which keeps it non-negative. The kernel
bandwidth defaults to the median pairwise distance of the joined samples,
recomputed per call and treated as a constant under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidInputError, NumericalError, ShapeMismatchError
from .features import SpatialDescriptor

__all__ = [
    "KernelConfig",
    "rbf_kernel",
    "median_heuristic_bandwidth",
    "mmd2",
    "mmd_exp_loss",
]

# magnitude below which a negative estimate is treated as round-off
_NEG_TOL = 1e-9


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel settings: bandwidth selection rule and degeneracy floor."""

    bandwidth_mode: str = "median_heuristic"
    sigma: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.bandwidth_mode not in ("median_heuristic", "fixed"):
            raise InvalidInputError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.sigma <= 0:
            raise InvalidInputError("sigma must be positive")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")


def _as_samples(x: "SpatialDescriptor | Tensor", what: str) -> Tensor:
    data = x.data if isinstance(x, SpatialDescriptor) else x
    if data.dim() != 2:
        raise InvalidInputError(f"{what} must be a 2-d sample matrix, got {tuple(data.shape)}")
    if data.shape[0] < 1:
        raise InvalidInputError(f"{what} is empty")
    return data


def rbf_kernel(x: Tensor, y: Tensor, sigma: float) -> Tensor:
    """exp(-||x - y||^2 / (2 sigma^2)) for a single pair of vectors."""
    if x.shape != y.shape:
        raise ShapeMismatchError(f"kernel arguments differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    sq = (x - y).pow(2).sum()
    return torch.exp(-sq / (2.0 * sigma**2))


def median_heuristic_bandwidth(x: Tensor, y: Tensor, eps: float = 1e-6) -> float:
    """Median pairwise Euclidean distance over the joined samples.

    Self-pairs are excluded; if the median collapses below ``eps`` (all
    points identical) the floor ``eps`` is returned. The result is a plain
    float, so it never participates in differentiation.
    """
    x = _as_samples(x, "first sample set")
    y = _as_samples(y, "second sample set")
    z = torch.cat([x, y], dim=0)
    if z.shape[0] < 2:
        raise InvalidInputError("median heuristic needs at least 2 samples in total")
    with torch.no_grad():
        dists = torch.pdist(z.double())
        med = torch.quantile(dists, 0.5).item()
    return med if med >= eps else eps


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    return torch.cdist(a, b).pow(2)


def mmd2(x: "SpatialDescriptor | Tensor", y: "SpatialDescriptor | Tensor",
         cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Biased squared-MMD V-statistic between two sample sets (rows)."""
    xs = _as_samples(x, "first sample set")
    ys = _as_samples(y, "second sample set")
    if xs.shape[1] != ys.shape[1]:
        raise ShapeMismatchError(f"sample dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")

    if cfg.bandwidth_mode == "fixed":
        sigma = cfg.sigma
    else:
        sigma = median_heuristic_bandwidth(xs, ys, cfg.epsilon)
    denom = 2.0 * sigma**2

    k_xx = torch.exp(-_sq_dists(xs, xs) / denom).mean()
    k_yy = torch.exp(-_sq_dists(ys, ys) / denom).mean()
    k_xy = torch.exp(-_sq_dists(xs, ys) / denom).mean()
    val = k_xx + k_yy - 2.0 * k_xy
    if float(val) < -_NEG_TOL:
        raise NumericalError(f"mmd2 estimate is negative beyond round-off: {float(val)}")
    return val.clamp_min(0.0)


def mmd_exp_loss(pos: "SpatialDescriptor | Tensor", neg: "SpatialDescriptor | Tensor",
                 lambda_di: float, cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Dispersion loss lambda_di * exp(-mmd2(pos, neg)).

    Minimizing the negative exponent of the discrepancy pushes the two
    descriptor distributions apart while keeping the loss bounded in
    (0, lambda_di].
    """
    if lambda_di < 0:
        raise InvalidInputError("lambda_di must be non-negative")
    pos_t = _as_samples(pos, "positive descriptors")
    if lambda_di == 0.0:
        return pos_t.new_zeros(())
    return lambda_di * torch.exp(-mmd2(pos, neg, cfg))
