"""Micro/macro evaluation protocols over segment-aggregated predictions.

Metrics always compare per-segment aggregates (the mean of the predicted
shift parameter over a segment's pixels) against observed mean speeds; raw
pixels are never scored. Micro pools every (segment, sampled-time) pair
across the split; macro scores a fixed set of times separately and averages
them with equal weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data.format import SpeedDataset, TileBundle
from .data.sampling import example_at_time
from .losses import region_aggregate

# Monday and Saturday at 12am, 4am, 8am, 12pm, 5pm, 8pm (day 0 = Monday).
DEFAULT_MACRO_TIMES: tuple[tuple[int, int], ...] = tuple(
    (d, h) for d in (0, 5) for h in (0, 4, 8, 12, 17, 20)
)


class EvaluationError(RuntimeError):
    pass


@dataclass
class TimeMetrics:
    day: int
    hour: int
    rmse: float
    mae: float
    r2: float | None
    n_pairs: int


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    r2: float | None
    road_f1: float | None
    orientation_accuracy: float | None
    n_pairs: int
    per_time: list[TimeMetrics] = field(default_factory=list)
    dropped_times: list[tuple[int, int]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "r2": self.r2,
            "road_f1": self.road_f1,
            "orientation_accuracy": self.orientation_accuracy,
            "n_pairs": self.n_pairs,
            "per_time": [vars(t) for t in self.per_time],
            "dropped_times": list(self.dropped_times),
        }


def regression_metrics(
    predictions: np.ndarray, truths: np.ndarray
) -> tuple[float, float, float | None]:
    """(RMSE, MAE, R^2); R^2 is None when the truth pool has zero variance."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.shape != truths.shape or predictions.size == 0:
        raise EvaluationError("need matching, nonempty prediction/truth pools")
    residuals = predictions - truths
    rmse = float(np.sqrt(np.mean(residuals**2)))
    mae = float(np.mean(np.abs(residuals)))
    ss_tot = float(np.sum((truths - truths.mean()) ** 2))
    if ss_tot == 0.0:
        return rmse, mae, None
    r2 = 1.0 - float(np.sum(residuals**2)) / ss_tot
    return rmse, mae, r2


class _AuxAccumulator:
    """Pooled road-F1 and orientation-accuracy counters."""

    def __init__(self) -> None:
        self.tp = 0
        self.fp = 0
        self.fn = 0
        self.orient_correct = 0
        self.orient_total = 0

    def update(self, road_prob, road_mask, orientation_pred, orientation_bins) -> None:
        pred = road_prob > 0.5
        truth = road_mask.astype(bool)
        self.tp += int(np.sum(pred & truth))
        self.fp += int(np.sum(pred & ~truth))
        self.fn += int(np.sum(~pred & truth))
        supervised = orientation_bins >= 0
        self.orient_total += int(supervised.sum())
        self.orient_correct += int(
            np.sum(orientation_pred[supervised] == orientation_bins[supervised])
        )

    def road_f1(self) -> float | None:
        denom = 2 * self.tp + self.fp + self.fn
        return (2 * self.tp / denom) if denom else None

    def orientation_accuracy(self) -> float | None:
        return (self.orient_correct / self.orient_total) if self.orient_total else None


def _forward_example(model, example, device: str):
    image = torch.from_numpy(np.ascontiguousarray(example.image)).unsqueeze(0)
    loc = torch.from_numpy(np.ascontiguousarray(example.location_map)).unsqueeze(0)
    day = torch.tensor([example.day])
    hour = torch.tensor([example.hour])
    return model(
        image.to(device), loc.to(device), day.to(device), hour.to(device)
    )


def _score_example(model, example, device, pairs, aux: _AuxAccumulator) -> None:
    out = _forward_example(model, example, device)
    raster = torch.from_numpy(example.segment_raster.astype(np.int64))
    estimates = region_aggregate(out.speed_mu[0].cpu(), out.speed_sigma[0].cpu(), raster)
    by_id = {est.segment_id: est for est in estimates}
    for seg_id, (speed, _count) in example.observations.items():
        est = by_id.get(seg_id)
        if est is not None:
            pairs.append((est.mu_bar, speed))
    aux.update(
        torch.sigmoid(out.road_logits[0]).cpu().numpy(),
        example.road_mask,
        out.orientation_logits[0].argmax(dim=0).cpu().numpy(),
        example.orientation_bins,
    )


def evaluate_micro(
    model,
    dataset: SpeedDataset,
    split: str = "test",
    seed: int = 0,
    device: str = "cpu",
    half_width: float = 2.0,
) -> MetricsReport:
    """One seeded observed time per tile; all pairs pooled across the split."""
    tile_ids = sorted(dataset.tile_ids(split))
    if not tile_ids:
        raise EvaluationError(f"split {split!r} has no tiles")
    rng = np.random.default_rng(seed)
    pairs: list[tuple[float, float]] = []
    aux = _AuxAccumulator()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for tile_id in tile_ids:
                bundle = dataset.load_tile(tile_id)
                times = bundle.observed_times()
                if not times:
                    continue
                day, hour = times[int(rng.integers(0, len(times)))]
                num_bins = getattr(getattr(model, "cfg", None), "orientation_bins", 16)
                example = example_at_time(
                    bundle, dataset.region_bounds, day, hour, half_width, num_bins
                )
                _score_example(model, example, device, pairs, aux)
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    if not pairs:
        raise EvaluationError(f"no observed segments found in split {split!r}")
    preds, truths = np.array([p for p, _ in pairs]), np.array([t for _, t in pairs])
    rmse, mae, r2 = regression_metrics(preds, truths)
    return MetricsReport(
        rmse=rmse,
        mae=mae,
        r2=r2,
        road_f1=aux.road_f1(),
        orientation_accuracy=aux.orientation_accuracy(),
        n_pairs=len(pairs),
    )


def evaluate_macro(
    model,
    dataset: SpeedDataset,
    split: str = "test",
    times: tuple[tuple[int, int], ...] = DEFAULT_MACRO_TIMES,
    device: str = "cpu",
    half_width: float = 2.0,
) -> MetricsReport:
    """Fixed times scored separately, then averaged with equal weight.

    Times with no eligible tile are dropped and reported in the result.
    """
    tile_ids = sorted(dataset.tile_ids(split))
    if not tile_ids:
        raise EvaluationError(f"split {split!r} has no tiles")
    bundles = [dataset.load_tile(tid) for tid in tile_ids]
    per_time: list[TimeMetrics] = []
    dropped: list[tuple[int, int]] = []
    aux_means: list[tuple[float | None, float | None]] = []
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for day, hour in times:
                pairs: list[tuple[float, float]] = []
                aux = _AuxAccumulator()
                for bundle in bundles:
                    if not bundle.observations_at(day, hour):
                        continue
                    num_bins = getattr(getattr(model, "cfg", None), "orientation_bins", 16)
                    example = example_at_time(
                        bundle, dataset.region_bounds, day, hour, half_width, num_bins
                    )
                    _score_example(model, example, device, pairs, aux)
                if not pairs:
                    dropped.append((day, hour))
                    continue
                preds = np.array([p for p, _ in pairs])
                truths = np.array([t for _, t in pairs])
                rmse, mae, r2 = regression_metrics(preds, truths)
                per_time.append(TimeMetrics(day, hour, rmse, mae, r2, len(pairs)))
                aux_means.append((aux.road_f1(), aux.orientation_accuracy()))
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    if not per_time:
        raise EvaluationError("every requested time had zero eligible tiles")
    r2_values = [t.r2 for t in per_time if t.r2 is not None]
    f1_values = [f for f, _ in aux_means if f is not None]
    acc_values = [a for _, a in aux_means if a is not None]
    return MetricsReport(
        rmse=float(np.mean([t.rmse for t in per_time])),
        mae=float(np.mean([t.mae for t in per_time])),
        r2=float(np.mean(r2_values)) if r2_values else None,
        road_f1=float(np.mean(f1_values)) if f1_values else None,
        orientation_accuracy=float(np.mean(acc_values)) if acc_values else None,
        n_pairs=sum(t.n_pairs for t in per_time),
        per_time=per_time,
        dropped_times=dropped,
    )
