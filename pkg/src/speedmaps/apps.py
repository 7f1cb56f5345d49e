"""Model applications: dense prediction, per-segment time series, motion-model
and travel-time exports, time-embedding visualization, uncertainty curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data.format import TileBundle
from .geo import MercatorBounds, SegmentRecord
from .losses import SegmentEstimate, region_aggregate, student_t_pdf
from .model.gtpe import cyclic_time_features

HOURS_PER_WEEK = 168
MIN_TRAVEL_SPEED = 0.1  # km/h floor for travel-time division


@dataclass
class DensePrediction:
    tile_id: str
    day: int
    hour: int
    mu: np.ndarray  # [H, W] km/h
    sigma: np.ndarray  # [H, W] km/h
    road_prob: np.ndarray  # [H, W] in (0, 1)
    orientation_bins: np.ndarray  # [H, W] int
    num_bins: int


def _model_inputs(bundle: TileBundle, region: MercatorBounds, day, hour, device):
    image = torch.from_numpy(np.ascontiguousarray(bundle.tile.image)).unsqueeze(0)
    loc = torch.from_numpy(np.ascontiguousarray(bundle.location_map(region))).unsqueeze(0)
    day_t = torch.as_tensor(day).reshape(-1)
    hour_t = torch.as_tensor(hour).reshape(-1)
    n = day_t.numel()
    if n > 1:
        image = image.expand(n, -1, -1, -1)
        loc = loc.expand(n, -1, -1, -1)
    return image.to(device), loc.to(device), day_t.to(device), hour_t.to(device)


def predict_dense(
    model, bundle: TileBundle, region: MercatorBounds, day: int, hour: int,
    device: str = "cpu",
) -> DensePrediction:
    """Full-resolution (mu, sigma, road probability, orientation bin) maps."""
    model.eval()
    with torch.no_grad():
        out = model(*_model_inputs(bundle, region, day, hour, device))
    return DensePrediction(
        tile_id=bundle.tile_id,
        day=day,
        hour=hour,
        mu=out.speed_mu[0].cpu().numpy(),
        sigma=out.speed_sigma[0].cpu().numpy(),
        road_prob=torch.sigmoid(out.road_logits[0]).cpu().numpy(),
        orientation_bins=out.orientation_logits[0].argmax(dim=0).cpu().numpy().astype(np.int32),
        num_bins=out.orientation_logits.shape[1],
    )


def aggregate_prediction(
    dense: DensePrediction, bundle: TileBundle, half_width: float = 2.0
) -> list[SegmentEstimate]:
    """Optional segment-aggregated overlay of a dense prediction."""
    masks = bundle.label_masks(half_width)
    raster = torch.from_numpy(masks.segment_raster.astype(np.int64))
    return region_aggregate(
        torch.from_numpy(dense.mu), torch.from_numpy(dense.sigma), raster
    )


@dataclass
class TimeSeriesPoint:
    day: int
    hour: int
    mu_bar: float
    sigma_bar: float


def segment_timeseries(
    model, bundle: TileBundle, region: MercatorBounds, segment_id: int,
    device: str = "cpu", half_width: float = 2.0, chunk: int = 24,
) -> list[TimeSeriesPoint]:
    """Aggregated (mu, sigma) for one segment at all 168 (day, hour) pairs."""
    masks = bundle.label_masks(half_width)
    seg_mask = torch.from_numpy(masks.segment_raster == segment_id)
    if not bool(seg_mask.any()):
        raise ValueError(f"segment {segment_id} has no pixels in tile {bundle.tile_id}")
    times = [(d, h) for d in range(7) for h in range(24)]
    points: list[TimeSeriesPoint] = []
    model.eval()
    with torch.no_grad():
        for c0 in range(0, len(times), chunk):
            batch = times[c0 : c0 + chunk]
            days = torch.tensor([d for d, _ in batch])
            hours = torch.tensor([h for _, h in batch])
            out = model(*_model_inputs(bundle, region, days, hours, device))
            for k, (d, h) in enumerate(batch):
                mu = float(out.speed_mu[k][seg_mask].mean())
                sigma = float(out.speed_sigma[k][seg_mask].mean())
                points.append(TimeSeriesPoint(d, h, mu, sigma))
    return points


def export_motion_model(
    dense: DensePrediction, bundle: TileBundle, stride: int = 8,
    road_threshold: float = 0.5,
) -> dict:
    """GeoJSON arrows (point + bearing + speed) on a stride grid of road pixels.

    Bearings are the canonical bin angles (multiples of 360/K degrees,
    counterclockwise from due east). Coordinates are web-mercator meters.
    """
    cols, rows = bundle.tile.pixel_center_axes()
    bin_width = 360.0 / dense.num_bins
    features = []
    h, w = dense.road_prob.shape
    for i in range(stride // 2, h, stride):
        for j in range(stride // 2, w, stride):
            if dense.road_prob[i, j] <= road_threshold:
                continue
            features.append(
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "Point",
                        "coordinates": [float(cols[j]), float(rows[i])],
                    },
                    "properties": {
                        "bearing_deg": float(dense.orientation_bins[i, j] * bin_width),
                        "speed_kmh": float(dense.mu[i, j]),
                        "road_prob": float(dense.road_prob[i, j]),
                    },
                }
            )
    return {
        "type": "FeatureCollection",
        "features": features,
        "properties": {
            "crs": "web-mercator meters",
            "tile_id": dense.tile_id,
            "day": dense.day,
            "hour": dense.hour,
        },
    }


@dataclass
class TravelTimeRow:
    segment_id: int
    length_m: float
    mu_bar_kmh: float
    travel_seconds: float
    clamped: bool


def export_travel_times(
    dense: DensePrediction, bundle: TileBundle, half_width: float = 2.0
) -> list[TravelTimeRow]:
    """Per-segment travel time from aggregated predicted speed and length.

    travel_seconds = 3.6 * length_m / mu_bar; speeds below 0.1 km/h are
    clamped to the floor and flagged.
    """
    estimates = {e.segment_id: e for e in aggregate_prediction(dense, bundle, half_width)}
    rows = []
    for seg in sorted(bundle.segments, key=lambda s: s.segment_id):
        est = estimates.get(seg.segment_id)
        if est is None:
            continue
        mu = est.mu_bar
        clamped = mu < MIN_TRAVEL_SPEED
        mu_eff = max(mu, MIN_TRAVEL_SPEED)
        length = seg.length()
        rows.append(
            TravelTimeRow(
                segment_id=seg.segment_id,
                length_m=length,
                mu_bar_kmh=mu,
                travel_seconds=3.6 * length / mu_eff,
                clamped=clamped,
            )
        )
    return rows


@dataclass
class TimeEmbeddingImage:
    scores: np.ndarray  # [7, 24, 3] PCA scores
    image: np.ndarray  # [7, 24, 3] scores rescaled to [0, 1] per component
    components: np.ndarray  # [3, 64]
    explained_variance: np.ndarray  # [3]


def time_embedding_image(model) -> TimeEmbeddingImage:
    """False-color 7x24 matrix of the time pathway via 3-component PCA.

    PCA comes from an eigendecomposition of the embedding covariance;
    component signs are fixed so each component's largest-magnitude entry
    is positive.
    """
    gtpe = getattr(model, "gtpe", None)
    if gtpe is None or gtpe.time_net is None:
        raise ValueError("model has no time pathway to visualize")
    days = torch.tensor([d for d in range(7) for _ in range(24)])
    hours = torch.tensor([h for _ in range(7) for h in range(24)])
    with torch.no_grad():
        feats = gtpe.time_net(cyclic_time_features(days, hours))
    x = feats.cpu().numpy().astype(np.float64)  # [168, dim]
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:3]
    components = eigvecs[:, order].T.copy()  # [3, dim]
    for k in range(components.shape[0]):
        lead = np.argmax(np.abs(components[k]))
        if components[k, lead] < 0:
            components[k] = -components[k]
    scores = centered @ components.T  # [168, 3]
    grid = scores.reshape(7, 24, 3)
    lo = grid.min(axis=(0, 1), keepdims=True)
    hi = grid.max(axis=(0, 1), keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return TimeEmbeddingImage(
        scores=grid,
        image=(grid - lo) / span,
        components=components,
        explained_variance=eigvals[order],
    )


@dataclass
class UncertaintyCurve:
    segment_id: int
    day: int
    hour: int
    mu_bar: float
    sigma_bar: float
    nu: int
    observed_speed: float
    speeds: np.ndarray  # [241] km/h grid 0..120 step 0.5
    density: np.ndarray  # [241]


def uncertainty_curve(
    model, bundle: TileBundle, region: MercatorBounds, segment_id: int,
    day: int, hour: int, device: str = "cpu", half_width: float = 2.0,
    max_speed: float = 120.0, step: float = 0.5,
) -> UncertaintyCurve:
    """Tabulated per-segment speed density with the observed speed marked."""
    by_id = {s.segment_id: s for s in bundle.segments}
    seg = by_id.get(segment_id)
    if seg is None:
        raise ValueError(f"segment {segment_id} not in tile {bundle.tile_id}")
    obs = seg.observations.get((day, hour))
    if obs is None:
        raise ValueError(
            f"segment {segment_id} has no observation at day={day}, hour={hour}"
        )
    observed_speed, nu = obs
    dense = predict_dense(model, bundle, region, day, hour, device)
    estimates = {e.segment_id: e for e in aggregate_prediction(dense, bundle, half_width)}
    est = estimates.get(segment_id)
    if est is None:
        raise ValueError(f"segment {segment_id} has no pixels in tile {bundle.tile_id}")
    speeds = np.arange(0.0, max_speed + step / 2, step)
    density = student_t_pdf(
        torch.from_numpy(speeds),
        torch.tensor(float(nu), dtype=torch.float64),
        torch.tensor(est.mu_bar, dtype=torch.float64),
        torch.tensor(est.sigma_bar, dtype=torch.float64),
    ).numpy()
    return UncertaintyCurve(
        segment_id=segment_id,
        day=day,
        hour=hour,
        mu_bar=est.mu_bar,
        sigma_bar=est.sigma_bar,
        nu=nu,
        observed_speed=observed_speed,
        speeds=speeds,
        density=density,
    )
