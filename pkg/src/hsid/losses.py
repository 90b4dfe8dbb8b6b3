"""Training losses: Charbonnier, histogram KL, and spectral consistency.

All losses are torch functions, differentiable everywhere, and reduced to
scalars. The KL term compares two differentiable soft histograms of pixel
values so that distribution consistency can be trained by gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DegenerateDistributionError

KL_FLOOR = 1e-8
SPECTRAL_EPS = 1e-8


@dataclass
class LossConfig:
    epsilon: float = 1e-3
    lambda_k: float = 0.01
    lambda_s: float = 10.0
    histogram_bins: int = 64
    histogram_bandwidth: float = 0.5  # kernel sigma as a fraction of bin width
    histogram_range: tuple[float, float] = (0.0, 1.0)
    spectral_squared_denominator: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_k < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be >= 0")
        if self.histogram_bins < 2:
            raise ValueError("need at least 2 histogram bins")


@dataclass
class Distribution:
    """Discrete probability masses over shared bin edges."""

    probs: torch.Tensor
    bin_edges: torch.Tensor

    def __post_init__(self):
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probs must sum to 1, got {total}")
        if float(self.probs.min()) < 0:
            raise ValueError("probs must be non-negative")


def charbonnier(x: torch.Tensor, xhat: torch.Tensor, epsilon: float = 1e-3) -> torch.Tensor:
    """Mean of sqrt(diff^2 + eps^2); a smooth L1 with floor eps."""
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    return torch.sqrt((x - xhat) ** 2 + epsilon**2).mean()


def soft_histogram(values: torch.Tensor, bins: int = 64,
                   value_range: tuple[float, float] = (0.0, 1.0),
                   bandwidth: float = 0.5) -> Distribution:
    """Differentiable histogram: each value spreads Gaussian mass over bins.

    The kernel sigma is ``bandwidth`` times the bin width; masses are
    normalized to sum to one.
    """
    lo, hi = value_range
    if not (hi > lo):
        raise ValueError(f"invalid range {value_range}")
    v = values.reshape(-1)
    if bool(((v < lo) | (v > hi)).all()):
        raise DegenerateDistributionError("all values fall outside the histogram range")
    edges = torch.linspace(lo, hi, bins + 1, dtype=v.dtype, device=v.device)
    centers = (edges[:-1] + edges[1:]) / 2
    width = (hi - lo) / bins
    sigma = max(bandwidth * width, 1e-12)
    mass = torch.exp(-((v[:, None] - centers[None, :]) ** 2) / (2 * sigma**2)).sum(dim=0)
    total = mass.sum()
    if not bool(total > 0):
        raise DegenerateDistributionError("histogram mass underflowed to zero")
    return Distribution(probs=mass / total, bin_edges=edges)


def kl_divergence(p: Distribution, q: Distribution) -> torch.Tensor:
    """KL(p || q) in nats over shared bins; both sides floored before the log
    so identical distributions give exactly zero."""
    if p.bin_edges.shape != q.bin_edges.shape or not torch.allclose(
        p.bin_edges, q.bin_edges
    ):
        raise ValueError("distributions must share bin edges")
    pp = p.probs
    log_ratio = torch.log(pp.clamp(min=KL_FLOOR)) - torch.log(q.probs.clamp(min=KL_FLOOR))
    return (pp * log_ratio).sum()


def spectral_consistency(x: torch.Tensor, xhat: torch.Tensor,
                         squared_denominator: bool = False) -> torch.Tensor:
    """One minus the mean per-pixel spectral cosine similarity.

    Spectra run along dim -3 (the band axis of a (..., D, H, W) tensor).
    ``squared_denominator`` switches to the raw squared-norm normalization,
    which is not scale invariant; kept only for comparison.
    """
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    dot = (x * xhat).sum(dim=-3)
    nx = torch.linalg.vector_norm(x, dim=-3)
    ny = torch.linalg.vector_norm(xhat, dim=-3)
    if squared_denominator:
        denom = nx**2 * ny**2 + SPECTRAL_EPS
    else:
        denom = nx * ny + SPECTRAL_EPS
    return 1.0 - (dot / denom).mean()


def total_loss(x: torch.Tensor, xhat: torch.Tensor,
               yhat: torch.Tensor | None, y_e: torch.Tensor | None,
               config: LossConfig) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the three terms plus a per-term breakdown.

    The KL term compares the pixel-value distribution of the synthetic
    explicit-noise sample ``y_e`` (target) with the intermediate prediction
    ``yhat``; it is skipped when its weight is zero or either input is None.
    """
    lc = charbonnier(x, xhat, config.epsilon)
    zero = torch.zeros((), dtype=lc.dtype, device=lc.device)
    lk = zero
    if config.lambda_k > 0 and yhat is not None and y_e is not None:
        p = soft_histogram(y_e.detach(), config.histogram_bins,
                           config.histogram_range, config.histogram_bandwidth)
        q = soft_histogram(yhat, config.histogram_bins,
                           config.histogram_range, config.histogram_bandwidth)
        lk = kl_divergence(p, q)
    ls = zero
    if config.lambda_s > 0:
        ls = spectral_consistency(x, xhat, config.spectral_squared_denominator)
    total = lc + config.lambda_k * lk + config.lambda_s * ls
    breakdown = {"charbonnier": lc, "kl": lk, "spectral": ls, "total": total}
    return total, breakdown
