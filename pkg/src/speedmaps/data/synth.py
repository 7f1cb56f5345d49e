"""Deterministic synthetic-city generator.

Each tile gets a small grid-plus-diagonal road network. Roads are drawn into
the imagery with width and brightness tied to their class, so speed is
visually inferable; ground-truth speeds follow

    y(segment, day, hour) = base(class) * diurnal(hour) * daytype(day)
                            * spatial(easting) + offset + noise

with a per-(segment, time) Bernoulli observation mask to emulate the sparsity
of real aggregate traffic data. The same seed always produces bit-identical
datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geo import MercatorBounds, SegmentRecord, polyline_distance_field
from .format import (
    MANIFEST_NAME,
    TILES_DIR,
    DatasetManifest,
    SpeedDataset,
    TileEntry,
    _write_image,
    assign_splits,
    load_dataset,
    write_segments,
)

CLASS_NAMES = ("street", "avenue", "highway")


@dataclass
class SynthSpec:
    seed: int = 0
    name: str = "synthville"
    tiles: int = 16
    tile_size: int = 256
    resolution: float = 1.2
    origin_easting: float = 1_000_000.0
    origin_northing: float = 5_000_000.0
    class_speeds: tuple[float, float, float] = (25.0, 45.0, 70.0)
    class_draw_half_widths: tuple[float, float, float] = (3.0, 4.5, 6.5)
    class_tones: tuple[float, float, float] = (0.46, 0.62, 0.80)
    diurnal_dip: float = 0.35
    rush_hours: tuple[float, float] = (8.0, 17.0)
    rush_width: float = 2.0
    weekend_factor: float = 1.12
    spatial_gradient: float = 0.12
    noise_sigma: float = 1.0
    observe_rate: float = 0.35
    count_mean: float = 4.0
    speed_offset: float = 0.0
    diagonal_rate: float = 0.7

    def validate(self) -> None:
        if self.tiles < 1:
            raise ValueError("need at least one tile")
        if self.tile_size < 32:
            raise ValueError("tile_size must be >= 32")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not (0 < self.observe_rate <= 1):
            raise ValueError("observe_rate must lie in (0, 1]")
        if min(self.class_speeds) <= 0:
            raise ValueError("class speeds must be positive")

    @property
    def tile_extent(self) -> float:
        return self.tile_size * self.resolution

    def grid_shape(self) -> tuple[int, int]:
        nx = math.ceil(math.sqrt(self.tiles))
        ny = math.ceil(self.tiles / nx)
        return nx, ny

    def region_bounds(self) -> MercatorBounds:
        nx, ny = self.grid_shape()
        return MercatorBounds(
            easting_min=self.origin_easting,
            easting_max=self.origin_easting + nx * self.tile_extent,
            northing_min=self.origin_northing,
            northing_max=self.origin_northing + ny * self.tile_extent,
        )

    def diurnal(self, hour: float) -> float:
        r1, r2 = self.rush_hours
        w2 = 2.0 * self.rush_width**2
        return 1.0 - self.diurnal_dip * (
            math.exp(-((hour - r1) ** 2) / w2) + math.exp(-((hour - r2) ** 2) / w2)
        )

    def daytype(self, day: int) -> float:
        return self.weekend_factor if day >= 5 else 1.0

    def spatial(self, x_norm: float) -> float:
        return 1.0 + self.spatial_gradient * x_norm

    def expected_speed(self, class_idx: int, day: int, hour: int, x_norm: float) -> float:
        """Noise-free generative speed for a segment of the given class."""
        return (
            self.class_speeds[class_idx]
            * self.diurnal(hour)
            * self.daytype(day)
            * self.spatial(x_norm)
            + self.speed_offset
        )


def _tile_roads(
    rng: np.random.Generator, bounds: MercatorBounds, spec: SynthSpec
) -> list[tuple[list[tuple[float, float]], int]]:
    """Road polylines (world coords) with class indices for one tile.

    Classes are drawn independently of road position and orientation so the
    imagery (width/brightness) is the only class cue; a location-only model
    must not be able to infer them.
    """

    def jitter() -> float:
        return float(rng.uniform(-2.0, 2.0))

    def maybe_reverse(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
        return points[::-1] if rng.random() < 0.5 else points

    def pick_class() -> int:
        return int(rng.integers(0, len(CLASS_NAMES)))

    e0, e1 = bounds.easting_min, bounds.easting_max
    n0, n1 = bounds.northing_min, bounds.northing_max
    w, h = bounds.width, bounds.height
    roads = []
    for frac in (0.22 + 0.12 * rng.random(), 0.62 + 0.12 * rng.random()):
        x = e0 + frac * w
        roads.append(
            (maybe_reverse([(x, n0), (x + jitter(), 0.5 * (n0 + n1)), (x, n1)]),
             pick_class())
        )
    for frac in (0.22 + 0.12 * rng.random(), 0.62 + 0.12 * rng.random()):
        y = n0 + frac * h
        roads.append(
            (maybe_reverse([(e0, y), (0.5 * (e0 + e1), y + jitter()), (e1, y)]),
             pick_class())
        )
    if rng.random() < spec.diagonal_rate:
        if rng.random() < 0.5:
            line = [(e0, n0), (0.5 * (e0 + e1) + jitter(), 0.5 * (n0 + n1)), (e1, n1)]
        else:
            line = [(e0, n1), (0.5 * (e0 + e1) + jitter(), 0.5 * (n0 + n1)), (e1, n0)]
        roads.append((maybe_reverse(line), pick_class()))
    return roads


def _render_image(
    rng: np.random.Generator,
    spec: SynthSpec,
    bounds: MercatorBounds,
    roads: list[tuple[list[tuple[float, float]], int]],
) -> np.ndarray:
    size = spec.tile_size
    base = 0.28 + 0.05 * rng.random()
    img = np.full((3, size, size), base, dtype=np.float64)
    img[1] += 0.03  # vegetation tint
    coarse = rng.normal(0.0, 1.0, (3, max(2, size // 16), max(2, size // 16)))
    reps = math.ceil(size / coarse.shape[1])
    blotch = np.kron(coarse, np.ones((reps, reps)))[:, :size, :size]
    img += 0.03 * blotch
    img += rng.normal(0.0, 0.015, (3, size, size))

    cols = bounds.easting_min + (np.arange(size) + 0.5) * spec.resolution
    rows = bounds.northing_max - (np.arange(size) + 0.5) * spec.resolution
    order = sorted(range(len(roads)), key=lambda k: roads[k][1])  # highways last
    for k in order:
        polyline, cls = roads[k]
        half = spec.class_draw_half_widths[cls]
        dist = polyline_distance_field(polyline, cols, rows, spec.resolution, half)
        mask = dist <= half
        tone = spec.class_tones[cls]
        paint = tone + rng.normal(0.0, 0.02, (3, int(mask.sum())))
        img[:, mask] = paint
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _segment_observations(
    rng: np.random.Generator, spec: SynthSpec, class_idx: int, x_norm: float
) -> dict[tuple[int, int], tuple[float, int]]:
    present = rng.random((7, 24)) < spec.observe_rate
    if not present.any():
        present[rng.integers(0, 7), rng.integers(0, 24)] = True
    obs = {}
    for day in range(7):
        for hour in range(24):
            if not present[day, hour]:
                continue
            speed = spec.expected_speed(class_idx, day, hour, x_norm) + float(
                rng.normal(0.0, spec.noise_sigma)
            )
            count = 1 + int(rng.poisson(max(0.0, spec.count_mean - 1.0)))
            obs[(day, hour)] = (round(max(0.0, speed), 3), count)
    return obs


def synth_city(spec: SynthSpec, root: str | Path) -> SpeedDataset:
    """Generate a dataset under ``root`` and return it loaded."""
    spec.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    region = spec.region_bounds()
    mid_e, _ = region.center
    half_e = 0.5 * region.width
    nx, _ = spec.grid_shape()

    tile_ids = [f"t{t:04d}" for t in range(spec.tiles)]
    splits = assign_splits(tile_ids, spec.seed)
    entries = []
    next_segment_id = 1
    for t, tile_id in enumerate(tile_ids):
        gx, gy = t % nx, t // nx
        bounds = MercatorBounds(
            easting_min=spec.origin_easting + gx * spec.tile_extent,
            easting_max=spec.origin_easting + (gx + 1) * spec.tile_extent,
            northing_min=spec.origin_northing + gy * spec.tile_extent,
            northing_max=spec.origin_northing + (gy + 1) * spec.tile_extent,
        )
        roads = _tile_roads(rng, bounds, spec)
        image = _render_image(rng, spec, bounds, roads)
        segments = []
        for polyline, cls in roads:
            mid = float(np.mean([p[0] for p in polyline]))
            x_norm = (mid - mid_e) / half_e
            seg = SegmentRecord(
                segment_id=next_segment_id,
                polyline=polyline,
                observations=_segment_observations(rng, spec, cls, x_norm),
                extras={"road_class": CLASS_NAMES[cls]},
            )
            seg.validate()
            segments.append(seg)
            next_segment_id += 1
        tile_dir = root / TILES_DIR / tile_id
        tile_dir.mkdir(parents=True, exist_ok=True)
        _write_image(tile_dir / "image.png", image)
        write_segments(segments, tile_dir / "segments.jsonl")
        entries.append(TileEntry(tile_id=tile_id, split=splits[tile_id], bounds=bounds))

    manifest = DatasetManifest(
        city=spec.name,
        region_bounds=region,
        resolution=spec.resolution,
        tile_size=spec.tile_size,
        seed=spec.seed,
        tiles=entries,
    )
    (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return load_dataset(root)
