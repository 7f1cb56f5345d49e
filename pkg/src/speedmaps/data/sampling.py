"""Per-iteration example assembly with dynamic time sampling.

A training example is a tile plus one (day, hour) drawn uniformly from the
times observed by at least one of its segments; the speed/count/valid masks
are regenerated for that time on every draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geo import MercatorBounds, make_speed_mask
from .format import TileBundle


@dataclass
class TrainingExample:
    tile_id: str
    image: np.ndarray  # float32 [3, H, W]
    location_map: np.ndarray  # float32 [2, H, W]
    day: int
    hour: int
    segment_raster: np.ndarray  # int32 [H, W]
    road_mask: np.ndarray  # uint8 [H, W]
    orientation_bins: np.ndarray  # int32 [H, W]
    speed: np.ndarray  # float32 [H, W]
    count: np.ndarray  # int32 [H, W]
    valid: np.ndarray  # uint8 [H, W]
    observations: dict[int, tuple[float, int]]  # segment_id -> (speed, count)


def sample_training_example(
    bundle: TileBundle,
    region_bounds: MercatorBounds,
    rng: np.random.Generator,
    half_width: float = 2.0,
    num_bins: int = 16,
) -> TrainingExample | None:
    """Draw a uniformly random observed time and build that time's masks.

    Returns None (skip signal) for tiles with no observations at all.
    """
    times = bundle.observed_times()
    if not times:
        return None
    day, hour = times[int(rng.integers(0, len(times)))]
    return example_at_time(bundle, region_bounds, day, hour, half_width, num_bins)


def example_at_time(
    bundle: TileBundle,
    region_bounds: MercatorBounds,
    day: int,
    hour: int,
    half_width: float = 2.0,
    num_bins: int = 16,
) -> TrainingExample:
    masks = bundle.label_masks(half_width, num_bins)
    speed, count, valid = make_speed_mask(
        masks.segment_raster, bundle.segments, day, hour
    )
    return TrainingExample(
        tile_id=bundle.tile_id,
        image=bundle.tile.image,
        location_map=bundle.location_map(region_bounds),
        day=day,
        hour=hour,
        segment_raster=masks.segment_raster,
        road_mask=masks.road_mask,
        orientation_bins=masks.orientation_bins,
        speed=speed,
        count=count,
        valid=valid,
        observations=bundle.observations_at(day, hour),
    )
