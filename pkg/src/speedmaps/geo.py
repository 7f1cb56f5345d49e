"""Georeferencing, road-geometry rasterization, and location-map construction.

Everything here is pure numpy on web-mercator (planar) coordinates in meters.
Raster convention: row 0 is the northern edge, column 0 the western edge.
Pixel *centers* are used for all distance tests; location maps sample the tile
bounds corner-inclusively so that corner pixels hit the normalization endpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Point = tuple[float, float]

DAYS_PER_WEEK = 7
HOURS_PER_DAY = 24


class GeoError(ValueError):
    """Invalid geometry or georeferencing input."""


@dataclass(frozen=True)
class MercatorBounds:
    """Axis-aligned rectangle in web-mercator meters."""

    easting_min: float
    easting_max: float
    northing_min: float
    northing_max: float

    @property
    def width(self) -> float:
        return self.easting_max - self.easting_min

    @property
    def height(self) -> float:
        return self.northing_max - self.northing_min

    @property
    def center(self) -> Point:
        return (
            0.5 * (self.easting_min + self.easting_max),
            0.5 * (self.northing_min + self.northing_max),
        )

    def intersects(self, other: "MercatorBounds") -> bool:
        return not (
            self.easting_max < other.easting_min
            or other.easting_max < self.easting_min
            or self.northing_max < other.northing_min
            or other.northing_max < self.northing_min
        )

    def require_positive_extent(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GeoError(
                f"degenerate bounds: width={self.width}, height={self.height}"
            )

    def to_dict(self) -> dict[str, float]:
        return {
            "easting_min": self.easting_min,
            "easting_max": self.easting_max,
            "northing_min": self.northing_min,
            "northing_max": self.northing_max,
        }

    @classmethod
    def from_dict(cls, d: dict[str, float]) -> "MercatorBounds":
        return cls(
            float(d["easting_min"]),
            float(d["easting_max"]),
            float(d["northing_min"]),
            float(d["northing_max"]),
        )


@dataclass
class OverheadTile:
    """Georeferenced RGB raster. ``image`` is float [3, H, W] in [0, 1]."""

    id: str
    image: np.ndarray
    bounds: MercatorBounds
    resolution: float

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise GeoError(f"tile {self.id}: image must be [3, H, W], got {self.image.shape}")
        _, h, w = self.image.shape
        if h != w:
            raise GeoError(f"tile {self.id}: tiles must be square, got {h}x{w}")
        self.bounds.require_positive_extent()
        for extent in (self.bounds.width, self.bounds.height):
            if abs(extent / h - self.resolution) > 1e-6 * max(abs(self.resolution), 1e-12):
                raise GeoError(
                    f"tile {self.id}: bounds extent {extent} / {h} px inconsistent "
                    f"with resolution {self.resolution}"
                )
        if not np.isfinite(self.image).all():
            raise GeoError(f"tile {self.id}: image contains non-finite values")
        if self.image.min() < 0 or self.image.max() > 1:
            raise GeoError(f"tile {self.id}: image values must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.image.shape[1]

    def pixel_center_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """(eastings[W], northings[H]) of pixel centers; row 0 is north."""
        n = self.size
        cols = self.bounds.easting_min + (np.arange(n, dtype=np.float64) + 0.5) * self.resolution
        rows = self.bounds.northing_max - (np.arange(n, dtype=np.float64) + 0.5) * self.resolution
        return cols, rows


@dataclass
class SegmentRecord:
    """Directed road-segment polyline with per-(day, hour) speed observations.

    ``observations`` maps (day, hour) -> (mean speed km/h, observation count).
    ``extras`` preserves unrecognized serialized fields for round-tripping.
    """

    segment_id: int
    polyline: list[Point]
    observations: dict[tuple[int, int], tuple[float, int]]
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.segment_id, int) or self.segment_id <= 0:
            raise GeoError(f"segment_id must be a positive integer, got {self.segment_id!r}")
        if len(self.polyline) < 2:
            raise GeoError(f"segment {self.segment_id}: polyline needs >= 2 points")
        for (ax, ay), (bx, by) in zip(self.polyline, self.polyline[1:]):
            if ax == bx and ay == by:
                raise GeoError(f"segment {self.segment_id}: consecutive duplicate point ({ax}, {ay})")
        for (day, hour), (speed, count) in self.observations.items():
            if not (0 <= day < DAYS_PER_WEEK):
                raise GeoError(f"segment {self.segment_id}: day {day} out of range")
            if not (0 <= hour < HOURS_PER_DAY):
                raise GeoError(f"segment {self.segment_id}: hour {hour} out of range")
            if not math.isfinite(speed) or speed < 0:
                raise GeoError(f"segment {self.segment_id}: bad speed {speed}")
            if not isinstance(count, int) or count < 1:
                raise GeoError(f"segment {self.segment_id}: count must be an integer >= 1")

    def length(self) -> float:
        pts = np.asarray(self.polyline, dtype=np.float64)
        return float(np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1])).sum())

    def chord_bearing(self) -> float:
        """Bearing of the first-to-last chord, degrees CCW from due east."""
        (ax, ay), (bx, by) = self.polyline[0], self.polyline[-1]
        return _bearing_deg(bx - ax, by - ay)


@dataclass
class LabelMasks:
    """Per-pixel training labels derived from road geometry."""

    segment_raster: np.ndarray  # int32 [H, W]; 0 = background
    road_mask: np.ndarray  # uint8 [H, W]
    orientation_bins: np.ndarray  # int32 [H, W]; -1 = unsupervised


@dataclass
class GeoTemporalContext:
    """Dense normalized location map plus a (day, hour) stamp."""

    location_map: np.ndarray  # float32 [2, H, W] in [-1, 1]
    day: int
    hour: int


def _bearing_deg(dx: float, dy: float) -> float:
    """Degrees counterclockwise from due east, in [0, 360)."""
    deg = math.degrees(math.atan2(dy, dx)) % 360.0
    return 0.0 if deg == 360.0 else deg


def make_location_map(tile: OverheadTile, region_bounds: MercatorBounds) -> np.ndarray:
    """Normalized [easting, northing] coordinate map, float32 [2, H, W].

    Pixel (i, j) carries the region-normalized world coordinate sampled
    corner-inclusively across the tile bounds, so a tile spanning the whole
    region maps its corner pixels to exactly +-1.
    """
    region_bounds.require_positive_extent()
    if not tile.bounds.intersects(region_bounds):
        raise GeoError(f"tile {tile.id} does not intersect the region bounds")
    n = tile.size
    if n < 2:
        raise GeoError("location maps need tiles of at least 2x2 pixels")
    mid_e, mid_n = region_bounds.center
    half_e = 0.5 * region_bounds.width
    half_n = 0.5 * region_bounds.height
    eastings = np.linspace(tile.bounds.easting_min, tile.bounds.easting_max, n)
    northings = np.linspace(tile.bounds.northing_max, tile.bounds.northing_min, n)
    x = (eastings - mid_e) / half_e
    y = (northings - mid_n) / half_n
    out = np.empty((2, n, n), dtype=np.float32)
    out[0] = np.broadcast_to(x[None, :], (n, n))
    out[1] = np.broadcast_to(y[:, None], (n, n))
    return out


def _point_segment_distance(
    px: np.ndarray, py: np.ndarray, a: Point, b: Point
) -> np.ndarray:
    """Distance from points to the segment a-b. Shapes of px/py broadcast."""
    ax, ay = a
    bx, by = b
    dx = bx - ax
    dy = by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        return np.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def polyline_distance_field(
    polyline: list[Point],
    cols: np.ndarray,
    rows: np.ndarray,
    resolution: float,
    reach: float,
) -> np.ndarray:
    """Min distance from each (row, col) pixel center to the polyline.

    Distances are only guaranteed exact for pixels within ``reach`` of some
    portion's bounding box; everything else stays inf.
    """
    dist = np.full((len(rows), len(cols)), np.inf, dtype=np.float64)
    pad = reach + resolution
    for a, b in zip(polyline, polyline[1:]):
        e_lo, e_hi = min(a[0], b[0]) - pad, max(a[0], b[0]) + pad
        n_lo, n_hi = min(a[1], b[1]) - pad, max(a[1], b[1]) + pad
        j = np.nonzero((cols >= e_lo) & (cols <= e_hi))[0]
        i = np.nonzero((rows >= n_lo) & (rows <= n_hi))[0]
        if len(i) == 0 or len(j) == 0:
            continue
        d = _point_segment_distance(cols[j][None, :], rows[i][:, None], a, b)
        sub = dist[np.ix_(i, j)]
        np.minimum(sub, d, out=sub)
        dist[np.ix_(i, j)] = sub
    return dist


def _polyline_distance_field(
    polyline: list[Point], tile: OverheadTile, reach: float
) -> np.ndarray:
    cols, rows = tile.pixel_center_axes()
    return polyline_distance_field(polyline, cols, rows, tile.resolution, reach)


def rasterize_segments(
    segments: list[SegmentRecord], tile: OverheadTile, half_width: float = 2.0
) -> LabelMasks:
    """Buffer polylines into a segment-id raster and binary road mask.

    A pixel is road iff its center lies within ``half_width`` meters of some
    polyline; it gets the id of the nearest such polyline, ties going to the
    smallest segment_id. Orientation bins are left unsupervised (-1); see
    :func:`orientation_labels`.
    """
    if half_width <= 0:
        raise GeoError(f"half_width must be positive, got {half_width}")
    if tile.resolution <= 0:
        raise GeoError(f"tile resolution must be positive, got {tile.resolution}")
    n = tile.size
    best = np.full((n, n), np.inf, dtype=np.float64)
    ids = np.zeros((n, n), dtype=np.int32)
    for seg in sorted(segments, key=lambda s: s.segment_id):
        d = _polyline_distance_field(seg.polyline, tile, half_width)
        better = (d <= half_width) & (d < best)
        ids[better] = seg.segment_id
        best[better] = d[better]
    road = (ids != 0).astype(np.uint8)
    return LabelMasks(
        segment_raster=ids,
        road_mask=road,
        orientation_bins=np.full((n, n), -1, dtype=np.int32),
    )


def orientation_labels(
    segments: list[SegmentRecord],
    tile: OverheadTile,
    segment_raster: np.ndarray,
    num_bins: int = 16,
) -> np.ndarray:
    """Travel-bearing bin per road pixel, -1 on background.

    The bearing is that of the nearest portion (in digitization order) of the
    pixel's assigned polyline, measured counterclockwise from due east; the
    bin is floor(bearing / (360 / num_bins)) mod num_bins. A zero-length
    portion falls back to the whole-segment chord bearing. Equidistant
    portions resolve to the earliest in digitization order.
    """
    if num_bins < 2:
        raise GeoError(f"need at least 2 orientation bins, got {num_bins}")
    bins = np.full(segment_raster.shape, -1, dtype=np.int32)
    bin_width = 360.0 / num_bins
    cols, rows = tile.pixel_center_axes()
    by_id = {seg.segment_id: seg for seg in segments}
    for seg_id in np.unique(segment_raster):
        if seg_id == 0:
            continue
        seg = by_id.get(int(seg_id))
        if seg is None:
            raise GeoError(f"segment_raster references unknown segment id {seg_id}")
        ii, jj = np.nonzero(segment_raster == seg_id)
        px, py = cols[jj], rows[ii]
        portions = list(zip(seg.polyline, seg.polyline[1:]))
        dists = np.stack(
            [_point_segment_distance(px, py, a, b) for a, b in portions], axis=0
        )
        nearest = np.argmin(dists, axis=0)
        bearings = np.empty(len(portions), dtype=np.float64)
        for k, ((ax, ay), (bx, by)) in enumerate(portions):
            if ax == bx and ay == by:
                bearings[k] = seg.chord_bearing()
            else:
                bearings[k] = _bearing_deg(bx - ax, by - ay)
        pixel_bins = (np.floor(bearings[nearest] / bin_width).astype(np.int64)) % num_bins
        bins[ii, jj] = pixel_bins.astype(np.int32)
    return bins


def build_label_masks(
    segments: list[SegmentRecord],
    tile: OverheadTile,
    half_width: float = 2.0,
    num_bins: int = 16,
) -> LabelMasks:
    """Rasterize segments and fill orientation bins in one pass."""
    masks = rasterize_segments(segments, tile, half_width)
    masks.orientation_bins = orientation_labels(
        segments, tile, masks.segment_raster, num_bins
    )
    return masks


def make_speed_mask(
    segment_raster: np.ndarray,
    segments: list[SegmentRecord],
    day: int,
    hour: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcast each observed segment's (speed, count) over its pixels.

    Returns (speed km/h float32, count int32, valid uint8); pixels of
    segments without an observation at (day, hour) have valid == 0.
    """
    if not (0 <= day < DAYS_PER_WEEK):
        raise GeoError(f"day {day} out of range 0..6")
    if not (0 <= hour < HOURS_PER_DAY):
        raise GeoError(f"hour {hour} out of range 0..23")
    speed = np.zeros(segment_raster.shape, dtype=np.float32)
    count = np.zeros(segment_raster.shape, dtype=np.int32)
    valid = np.zeros(segment_raster.shape, dtype=np.uint8)
    for seg in segments:
        obs = seg.observations.get((day, hour))
        if obs is None:
            continue
        mask = segment_raster == seg.segment_id
        if not mask.any():
            continue
        speed[mask] = obs[0]
        count[mask] = obs[1]
        valid[mask] = 1
    return speed, count, valid
