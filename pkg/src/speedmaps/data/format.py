"""On-disk dataset layout: manifest + per-tile PNG imagery and JSONL segments.

Layout, all paths relative to the dataset root::

    manifest.json           city, region bounds, resolution, tile list + splits
    tiles/<id>/image.png    8-bit RGB, square, tile_size x tile_size
    tiles/<id>/segments.jsonl   one record per segment:
        {"id": 3, "observations": {"<day>,<hour>": [speed_kmh, count]},
         "polyline": [[easting, northing], ...], ...}

Serialization is canonical (sorted keys, no whitespace), so loading a dataset
and writing it back reproduces segments.jsonl byte for byte. Unknown record
fields survive the round trip via ``SegmentRecord.extras``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geo import GeoError, MercatorBounds, OverheadTile, SegmentRecord, build_label_masks, make_location_map

MANIFEST_NAME = "manifest.json"
TILES_DIR = "tiles"
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = {"train": 0.85, "val": 0.05, "test": 0.10}
FRACTION_TOLERANCE = 0.02
FRACTION_CHECK_MIN_TILES = 20


class DatasetError(ValueError):
    """Missing files or malformed dataset records."""


@dataclass
class TileEntry:
    tile_id: str
    split: str
    bounds: MercatorBounds


@dataclass
class DatasetManifest:
    city: str
    region_bounds: MercatorBounds
    resolution: float
    tile_size: int
    seed: int
    tiles: list[TileEntry]

    def split_ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [t.tile_id for t in self.tiles]
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [t.tile_id for t in self.tiles if t.split == split]

    def validate(self) -> None:
        if not self.tiles:
            raise DatasetError("manifest lists no tiles")
        self.region_bounds.require_positive_extent()
        if self.resolution <= 0:
            raise DatasetError(f"resolution must be positive, got {self.resolution}")
        seen: set[str] = set()
        for t in self.tiles:
            if t.split not in SPLITS:
                raise DatasetError(f"tile {t.tile_id}: unknown split {t.split!r}")
            if t.tile_id in seen:
                raise DatasetError(f"tile {t.tile_id} appears in more than one split entry")
            seen.add(t.tile_id)
        n = len(self.tiles)
        if n >= FRACTION_CHECK_MIN_TILES:
            for split, target in SPLIT_FRACTIONS.items():
                frac = len(self.split_ids(split)) / n
                if abs(frac - target) > FRACTION_TOLERANCE:
                    raise DatasetError(
                        f"split {split!r} holds {frac:.1%} of tiles; expected "
                        f"{target:.0%} +- {FRACTION_TOLERANCE:.0%}"
                    )

    def to_json(self) -> str:
        doc = {
            "city": self.city,
            "region_bounds": self.region_bounds.to_dict(),
            "resolution": self.resolution,
            "tile_size": self.tile_size,
            "seed": self.seed,
            "tiles": [
                {"id": t.tile_id, "split": t.split, "bounds": t.bounds.to_dict()}
                for t in self.tiles
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise DatasetError(f"manifest is not valid JSON: {e}") from e
        try:
            manifest = cls(
                city=doc["city"],
                region_bounds=MercatorBounds.from_dict(doc["region_bounds"]),
                resolution=float(doc["resolution"]),
                tile_size=int(doc["tile_size"]),
                seed=int(doc.get("seed", 0)),
                tiles=[
                    TileEntry(
                        tile_id=str(t["id"]),
                        split=str(t["split"]),
                        bounds=MercatorBounds.from_dict(t["bounds"]),
                    )
                    for t in doc["tiles"]
                ],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"manifest is missing or has malformed fields: {e}") from e
        manifest.validate()
        return manifest


def segment_to_json(seg: SegmentRecord) -> str:
    obs = {
        f"{d},{h}": [speed, count] for (d, h), (speed, count) in seg.observations.items()
    }
    doc = dict(seg.extras)
    doc.update(
        {
            "id": seg.segment_id,
            "polyline": [[float(e), float(n)] for e, n in seg.polyline],
            "observations": obs,
        }
    )
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def segment_from_json(line: str, where: str) -> SegmentRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{where}: malformed JSON record: {e}") from e
    try:
        observations = {}
        for key, value in doc["observations"].items():
            day_s, hour_s = key.split(",")
            speed, count = value
            observations[(int(day_s), int(hour_s))] = (float(speed), int(count))
        seg = SegmentRecord(
            segment_id=int(doc["id"]),
            polyline=[(float(e), float(n)) for e, n in doc["polyline"]],
            observations=observations,
            extras={k: v for k, v in doc.items() if k not in ("id", "polyline", "observations")},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{where}: malformed segment record: {e}") from e
    try:
        seg.validate()
    except GeoError as e:
        raise DatasetError(f"{where}: {e}") from e
    return seg


class TileBundle:
    """A tile plus its segments, with cached derived rasters."""

    def __init__(self, tile: OverheadTile, segments: list[SegmentRecord]):
        self.tile = tile
        self.segments = segments
        self._masks = None
        self._masks_key = None
        self._location_map = None
        self._location_key = None
        self._observed: list[tuple[int, int]] | None = None

    @property
    def tile_id(self) -> str:
        return self.tile.id

    def label_masks(self, half_width: float = 2.0, num_bins: int = 16):
        key = (half_width, num_bins)
        if self._masks_key != key:
            self._masks = build_label_masks(self.segments, self.tile, half_width, num_bins)
            self._masks_key = key
        return self._masks

    def location_map(self, region_bounds: MercatorBounds) -> np.ndarray:
        key = region_bounds
        if self._location_key != key:
            self._location_map = make_location_map(self.tile, region_bounds)
            self._location_key = key
        return self._location_map

    def observed_times(self) -> list[tuple[int, int]]:
        """Sorted (day, hour) pairs observed by at least one segment."""
        if self._observed is None:
            times = set()
            for seg in self.segments:
                times.update(seg.observations.keys())
            self._observed = sorted(times)
        return self._observed

    def observations_at(self, day: int, hour: int) -> dict[int, tuple[float, int]]:
        out = {}
        for seg in self.segments:
            obs = seg.observations.get((day, hour))
            if obs is not None:
                out[seg.segment_id] = obs
        return out


class SpeedDataset:
    """Loaded dataset handle; tile pixel data is read lazily and cached."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._entries = {t.tile_id: t for t in manifest.tiles}
        self._cache: dict[str, TileBundle] = {}

    @property
    def region_bounds(self) -> MercatorBounds:
        return self.manifest.region_bounds

    def tile_ids(self, split: str | None = None) -> list[str]:
        return self.manifest.split_ids(split)

    def tile_dir(self, tile_id: str) -> Path:
        return self.root / TILES_DIR / tile_id

    def load_tile(self, tile_id: str, cache: bool = True) -> TileBundle:
        if tile_id in self._cache:
            return self._cache[tile_id]
        entry = self._entries.get(tile_id)
        if entry is None:
            raise DatasetError(f"tile {tile_id!r} not present in manifest")
        tile_dir = self.tile_dir(tile_id)
        image_path = tile_dir / "image.png"
        segments_path = tile_dir / "segments.jsonl"
        if not image_path.is_file():
            raise DatasetError(f"tile {tile_id}: missing {image_path}")
        if not segments_path.is_file():
            raise DatasetError(f"tile {tile_id}: missing {segments_path}")
        image = _read_image(image_path, self.manifest.tile_size, tile_id)
        segments = []
        seen_ids: set[int] = set()
        with open(segments_path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                seg = segment_from_json(line, f"tile {tile_id} line {lineno}")
                if seg.segment_id in seen_ids:
                    raise DatasetError(
                        f"tile {tile_id}: duplicate segment id {seg.segment_id}"
                    )
                seen_ids.add(seg.segment_id)
                segments.append(seg)
        try:
            tile = OverheadTile(
                id=tile_id,
                image=image,
                bounds=entry.bounds,
                resolution=self.manifest.resolution,
            )
        except GeoError as e:
            raise DatasetError(f"tile {tile_id}: {e}") from e
        bundle = TileBundle(tile, segments)
        if cache:
            self._cache[tile_id] = bundle
        return bundle

    def bundles(self, split: str | None = None) -> list[TileBundle]:
        return [self.load_tile(tid) for tid in self.tile_ids(split)]


def _read_image(path: Path, expected_size: int, tile_id: str) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    if arr.shape[0] != expected_size or arr.shape[1] != expected_size:
        raise DatasetError(
            f"tile {tile_id}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"manifest says {expected_size}"
        )
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_dataset(root: str | Path) -> SpeedDataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest at {manifest_path}")
    manifest = DatasetManifest.from_json(manifest_path.read_text(encoding="utf-8"))
    return SpeedDataset(root, manifest)


def write_dataset(dataset: SpeedDataset, root: str | Path) -> Path:
    """Serialize a dataset (canonical form) under a new root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST_NAME).write_text(dataset.manifest.to_json(), encoding="utf-8")
    for tile_id in dataset.tile_ids():
        bundle = dataset.load_tile(tile_id, cache=False)
        tile_dir = root / TILES_DIR / tile_id
        tile_dir.mkdir(parents=True, exist_ok=True)
        _write_image(tile_dir / "image.png", bundle.tile.image)
        write_segments(bundle.segments, tile_dir / "segments.jsonl")
    return root


def write_segments(segments: list[SegmentRecord], path: Path) -> None:
    text = "".join(segment_to_json(seg) + "\n" for seg in segments)
    path.write_text(text, encoding="utf-8")


def assign_splits(tile_ids: list[str], seed: int) -> dict[str, str]:
    """Deterministic split per tile id: a pure function of (id, seed).

    Small datasets keep at least one val and one test tile (when >= 3 tiles),
    at the cost of drifting from the 85/5/10 target fractions.
    """
    import hashlib

    def rank(tid: str) -> str:
        return hashlib.sha256(f"{seed}:{tid}".encode()).hexdigest()

    ordered = sorted(tile_ids, key=rank)
    n = len(ordered)
    if n < 3:
        return {tid: "train" for tid in ordered}
    n_test = max(1, round(SPLIT_FRACTIONS["test"] * n))
    n_val = max(1, round(SPLIT_FRACTIONS["val"] * n))
    splits: dict[str, str] = {}
    for i, tid in enumerate(ordered):
        if i < n_test:
            splits[tid] = "test"
        elif i < n_test + n_val:
            splits[tid] = "val"
        else:
            splits[tid] = "train"
    return splits
