"""Probabilistic speed objective, region aggregation, and auxiliary losses.

Speed supervision is aggregate: per-pixel (mu, sigma) rasters are averaged
over each road segment's pixels, the observation count becomes the shape
parameter of a generalized Student's t, and the observed mean speed is scored
under that distribution's log density. Everything is computed in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

LOG_PI = math.log(math.pi)


class DomainError(ValueError):
    """Parameter outside the distribution's domain."""


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float64)


def student_t_log_pdf(x, nu, mu, sigma) -> Tensor:
    """Log density of the shift-scale Student's t with shape nu.

    log p = lgamma((nu+1)/2) - lgamma(nu/2) - 0.5*log(nu*pi) - log(sigma)
            - ((nu+1)/2) * log1p(((x-mu)/sigma)^2 / nu)
    """
    x, nu, mu, sigma = map(_as_tensor, (x, nu, mu, sigma))
    if (nu <= 0).any():
        raise DomainError("shape parameter nu must be > 0")
    if (sigma <= 0).any():
        raise DomainError("scale parameter sigma must be > 0")
    z = (x - mu) / sigma
    half = (nu + 1.0) / 2.0
    return (
        torch.lgamma(half)
        - torch.lgamma(nu / 2.0)
        - 0.5 * (torch.log(nu) + LOG_PI)
        - torch.log(sigma)
        - half * torch.log1p(z * z / nu)
    )


def student_t_pdf(x, nu, mu, sigma) -> Tensor:
    return torch.exp(student_t_log_pdf(x, nu, mu, sigma))


def student_t_nll(y, nu, mu, sigma) -> Tensor:
    """Negative log likelihood of an observed speed y; differentiable in mu, sigma."""
    return -student_t_log_pdf(y, nu, mu, sigma)


@dataclass
class SegmentEstimate:
    """Aggregated per-segment distribution parameters."""

    segment_id: int
    mu_bar: float
    sigma_bar: float
    pixel_count: int
    nu: int | None = None  # observation count, attached when supervision exists


def aggregate_by_segment(
    values: Tensor, segment_raster: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Mean of ``values`` over each nonzero segment id's pixels.

    values: [..., H, W]; segment_raster: integer [H, W].
    Returns (ids [S], means [..., S], pixel_counts [S]); differentiable in values.
    """
    if values.shape[-2:] != segment_raster.shape:
        raise ValueError(
            f"shape mismatch: values {tuple(values.shape)} vs raster {tuple(segment_raster.shape)}"
        )
    raster = segment_raster.reshape(-1)
    ids = torch.unique(raster)
    ids = ids[ids != 0]
    if ids.numel() == 0:
        lead = values.shape[:-2]
        return ids, values.new_zeros(lead + (0,)), torch.zeros(0, dtype=torch.long)
    on_road = raster != 0
    index = torch.searchsorted(ids, raster[on_road])
    flat = values.reshape(*values.shape[:-2], -1)
    sums = values.new_zeros(values.shape[:-2] + (ids.numel(),))
    sums.index_add_(-1, index, flat[..., on_road])
    counts = torch.bincount(index, minlength=ids.numel())
    means = sums / counts.to(values.dtype)
    return ids, means, counts


def region_aggregate(
    mu_map: Tensor, sigma_map: Tensor, segment_raster: Tensor
) -> list[SegmentEstimate]:
    """Average (mu, sigma) rasters over each segment present in the raster."""
    stacked = torch.stack([mu_map, sigma_map], dim=0)
    ids, means, counts = aggregate_by_segment(stacked, segment_raster)
    return [
        SegmentEstimate(
            segment_id=int(ids[k]),
            mu_bar=float(means[0, k]),
            sigma_bar=float(means[1, k]),
            pixel_count=int(counts[k]),
        )
        for k in range(ids.numel())
    ]


def speed_loss(
    mu_map: Tensor,
    sigma_map: Tensor,
    segment_raster: Tensor,
    observations: dict[int, tuple[float, int]],
) -> Tensor | None:
    """Mean Student's-t NLL over segments observed at the sampled time.

    ``observations`` maps segment_id -> (speed km/h, count). Segments absent
    from the raster or unobserved contribute nothing. Returns None when no
    supervision lands in this tile (the trainer skips such samples).
    """
    ids, means, _ = aggregate_by_segment(
        torch.stack([mu_map, sigma_map], dim=0), segment_raster
    )
    terms = []
    for k in range(ids.numel()):
        obs = observations.get(int(ids[k]))
        if obs is None:
            continue
        y, nu = obs
        terms.append(
            student_t_nll(
                means.new_tensor(float(y)),
                means.new_tensor(float(nu)),
                means[0, k],
                means[1, k],
            )
        )
    if not terms:
        return None
    return torch.stack(terms).mean()


def dice_coefficient(probs: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice with additive smoothing in numerator and denominator."""
    p = probs.reshape(-1)
    t = target.reshape(-1).to(probs.dtype)
    inter = (p * t).sum()
    return (2.0 * inter + smooth) / (p.sum() + t.sum() + smooth)


def road_loss(road_logits: Tensor, road_mask: Tensor) -> Tensor:
    """Binary cross-entropy plus (1 - Dice) against the road mask."""
    target = road_mask.to(road_logits.dtype)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(road_logits, target)
    dice = dice_coefficient(torch.sigmoid(road_logits), target)
    return bce + (1.0 - dice)


def orientation_loss(orientation_logits: Tensor, orientation_bins: Tensor) -> Tensor | None:
    """Mean cross-entropy over supervised pixels (bin >= 0); None if there are none.

    orientation_logits: [K, H, W] or [B, K, H, W]; bins of matching spatial shape
    with -1 marking unsupervised pixels.
    """
    if orientation_logits.dim() == 3:
        orientation_logits = orientation_logits.unsqueeze(0)
        orientation_bins = orientation_bins.unsqueeze(0)
    b, k, h, w = orientation_logits.shape
    logits = orientation_logits.permute(0, 2, 3, 1).reshape(-1, k)
    bins = orientation_bins.reshape(-1).long()
    supervised = bins >= 0
    if not supervised.any():
        return None
    return torch.nn.functional.cross_entropy(logits[supervised], bins[supervised])


def total_loss(
    speed: Tensor | None,
    road: Tensor | None,
    orientation: Tensor | None,
) -> Tensor:
    """Unweighted sum of the enabled task losses.

    Pass None for a disabled task (or one with no supervision this step).
    All-None is a configuration error: there is nothing to optimize.
    """
    terms = [t for t in (speed, road, orientation) if t is not None]
    if not terms:
        raise ValueError("all task losses disabled; nothing to optimize")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
