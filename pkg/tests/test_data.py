import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from speedmaps.data import DatasetError, SynthSpec, load_dataset, synth_city, write_dataset
from speedmaps.data.format import (
    DatasetManifest,
    MercatorBounds,
    TileEntry,
    assign_splits,
    segment_from_json,
    segment_to_json,
)
from speedmaps.data.sampling import sample_training_example
from speedmaps.geo import SegmentRecord


def tree_checksum(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- serialization


def test_segment_json_round_trip_preserves_extras():
    seg = SegmentRecord(
        segment_id=5,
        polyline=[(0.0, 0.0), (10.5, 3.25)],
        observations={(0, 8): (25.0, 7), (6, 23): (40.125, 2)},
        extras={"road_class": "avenue"},
    )
    line = segment_to_json(seg)
    back = segment_from_json(line, "test")
    assert back.segment_id == seg.segment_id
    assert back.polyline == seg.polyline
    assert back.observations == seg.observations
    assert back.extras == seg.extras
    assert segment_to_json(back) == line


def test_segment_json_rejects_bad_records():
    good = {"id": 1, "polyline": [[0, 0], [1, 1]], "observations": {"0,8": [10.0, 3]}}
    bad_cases = [
        {**good, "id": 0},
        {**good, "polyline": [[0, 0]]},
        {**good, "observations": {"7,0": [10.0, 3]}},
        {**good, "observations": {"0,24": [10.0, 3]}},
        {**good, "observations": {"0,8": [-4.0, 3]}},
        {**good, "observations": {"0,8": [10.0, 0]}},
        {**good, "polyline": [[0, 0], [0, 0]]},
    ]
    for doc in bad_cases:
        with pytest.raises(DatasetError):
            segment_from_json(json.dumps(doc), "test")


def test_manifest_rejects_duplicate_tiles():
    bounds = MercatorBounds(0, 10, 0, 10)
    manifest = DatasetManifest(
        city="x",
        region_bounds=bounds,
        resolution=1.0,
        tile_size=10,
        seed=0,
        tiles=[
            TileEntry("a", "train", bounds),
            TileEntry("a", "test", bounds),
        ],
    )
    with pytest.raises(DatasetError):
        manifest.validate()


def test_manifest_rejects_empty_tiles():
    with pytest.raises(DatasetError):
        DatasetManifest(
            city="x",
            region_bounds=MercatorBounds(0, 10, 0, 10),
            resolution=1.0,
            tile_size=10,
            seed=0,
            tiles=[],
        ).validate()


def test_manifest_fraction_check_large_datasets():
    bounds = MercatorBounds(0, 10, 0, 10)
    tiles = [TileEntry(f"t{i}", "train", bounds) for i in range(30)]
    manifest = DatasetManifest("x", bounds, 1.0, 10, 0, tiles)
    with pytest.raises(DatasetError, match="split"):
        manifest.validate()


# ---------------------------------------------------------------- generator


def test_synth_same_seed_identical_checksums(tmp_path):
    spec = SynthSpec(seed=4, tiles=4, tile_size=48, resolution=2.0)
    synth_city(spec, tmp_path / "a")
    synth_city(spec, tmp_path / "b")
    assert tree_checksum(tmp_path / "a") == tree_checksum(tmp_path / "b")


def test_synth_different_seed_differs(tmp_path):
    synth_city(SynthSpec(seed=1, tiles=4, tile_size=48, resolution=2.0), tmp_path / "a")
    synth_city(SynthSpec(seed=2, tiles=4, tile_size=48, resolution=2.0), tmp_path / "b")
    assert tree_checksum(tmp_path / "a") != tree_checksum(tmp_path / "b")


def test_synth_observation_sparsity(tiny_dataset):
    total_cells = 0
    observed = 0
    for tid in tiny_dataset.tile_ids():
        for seg in tiny_dataset.load_tile(tid).segments:
            total_cells += 7 * 24
            observed += len(seg.observations)
            assert len(seg.observations) >= 1
            for (_, _), (speed, count) in seg.observations.items():
                assert speed >= 0 and count >= 1
    assert 0 < observed < total_cells  # sparsity present


def test_synth_speeds_follow_generative_formula(tmp_path):
    spec = SynthSpec(seed=9, tiles=4, tile_size=48, resolution=2.0, noise_sigma=0.5)
    ds = synth_city(spec, tmp_path / "city")
    region = ds.region_bounds
    mid_e = 0.5 * (region.easting_min + region.easting_max)
    half_e = 0.5 * (region.easting_max - region.easting_min)
    class_idx = {"street": 0, "avenue": 1, "highway": 2}
    residuals = []
    for tid in ds.tile_ids():
        for seg in ds.load_tile(tid).segments:
            cls = class_idx[seg.extras["road_class"]]
            base = spec.class_speeds[cls]
            x_norm = (np.mean([p[0] for p in seg.polyline]) - mid_e) / half_e
            for (d, h), (speed, _) in seg.observations.items():
                # independent recomputation of the generative expectation
                r1, r2 = spec.rush_hours
                diurnal = 1.0 - spec.diurnal_dip * (
                    np.exp(-((h - r1) ** 2) / (2 * spec.rush_width**2))
                    + np.exp(-((h - r2) ** 2) / (2 * spec.rush_width**2))
                )
                daytype = spec.weekend_factor if d >= 5 else 1.0
                spatial = 1.0 + spec.spatial_gradient * x_norm
                residuals.append(speed - base * diurnal * daytype * spatial)
    residuals = np.array(residuals)
    assert abs(residuals.mean()) < 0.15  # centered noise
    assert residuals.std() == pytest.approx(spec.noise_sigma, rel=0.25)


def test_synth_rush_hour_slower_than_early_morning(tmp_path):
    spec = SynthSpec(seed=3, tiles=4, tile_size=48, resolution=2.0)
    at_8 = [spec.expected_speed(c, 1, 8, 0.0) for c in range(3)]
    at_4 = [spec.expected_speed(c, 1, 4, 0.0) for c in range(3)]
    assert all(s8 < s4 for s8, s4 in zip(at_8, at_4))


def test_split_assignment_pure_function_of_id_and_seed():
    ids = [f"t{i:03d}" for i in range(40)]
    a = assign_splits(ids, seed=7)
    b = assign_splits(list(reversed(ids)), seed=7)
    assert a == b
    c = assign_splits(ids, seed=8)
    assert a != c
    assert {v for v in a.values()} == {"train", "val", "test"}


# ---------------------------------------------------------------- loader


def test_loader_round_trip_segments_byte_identical(tiny_dataset, tmp_path):
    out = write_dataset(tiny_dataset, tmp_path / "copy")
    for tid in tiny_dataset.tile_ids():
        original = (tiny_dataset.root / "tiles" / tid / "segments.jsonl").read_bytes()
        copied = (out / "tiles" / tid / "segments.jsonl").read_bytes()
        assert original == copied
    reloaded = load_dataset(out)
    assert reloaded.tile_ids() == tiny_dataset.tile_ids()


def test_loader_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path)


def test_loader_missing_tile_files(tiny_dataset, tmp_path):
    out = write_dataset(tiny_dataset, tmp_path / "broken")
    victim = tiny_dataset.tile_ids()[0]
    (out / "tiles" / victim / "segments.jsonl").unlink()
    ds = load_dataset(out)
    with pytest.raises(DatasetError, match=victim):
        ds.load_tile(victim)


def test_loader_malformed_record_mentions_tile(tiny_dataset, tmp_path):
    out = write_dataset(tiny_dataset, tmp_path / "broken2")
    victim = tiny_dataset.tile_ids()[1]
    path = out / "tiles" / victim / "segments.jsonl"
    path.write_text(path.read_text() + '{"id": -3}\n')
    ds = load_dataset(out)
    with pytest.raises(DatasetError, match=victim):
        ds.load_tile(victim)


def test_loader_unknown_tile(tiny_dataset):
    with pytest.raises(DatasetError):
        tiny_dataset.load_tile("nope")


def test_dataset_image_values_in_range(tiny_dataset):
    bundle = tiny_dataset.load_tile(tiny_dataset.tile_ids()[0])
    assert bundle.tile.image.dtype == np.float32
    assert bundle.tile.image.min() >= 0.0
    assert bundle.tile.image.max() <= 1.0


# ---------------------------------------------------------------- sampling


def test_sample_training_example_only_observed_times(tiny_dataset):
    bundle = tiny_dataset.load_tile(tiny_dataset.tile_ids("train")[0])
    observed = set(bundle.observed_times())
    rng = np.random.default_rng(0)
    for _ in range(20):
        ex = sample_training_example(bundle, tiny_dataset.region_bounds, rng)
        assert (ex.day, ex.hour) in observed
        assert ex.valid.sum() > 0


def test_sample_training_example_single_time(tmp_path):
    ds = synth_city(SynthSpec(seed=5, tiles=4, tile_size=48, resolution=2.0), tmp_path / "c")
    bundle = ds.load_tile(ds.tile_ids()[0])
    only = bundle.observed_times()[0]
    for seg in bundle.segments:
        seg.observations = (
            {only: seg.observations[only]} if only in seg.observations else {}
        )
    bundle._observed = None  # rebuild the cache after mutating observations
    rng = np.random.default_rng(1)
    for _ in range(5):
        ex = sample_training_example(bundle, ds.region_bounds, rng)
        assert (ex.day, ex.hour) == only


def test_sample_training_example_skip_signal(tiny_dataset):
    bundle = tiny_dataset.load_tile(tiny_dataset.tile_ids()[0])
    stripped = type(bundle)(bundle.tile, [
        SegmentRecord(seg.segment_id, seg.polyline, {}) for seg in bundle.segments
    ])
    rng = np.random.default_rng(0)
    assert sample_training_example(stripped, tiny_dataset.region_bounds, rng) is None


def test_time_sampling_uniform_chi_squared(tiny_dataset):
    bundle = tiny_dataset.load_tile(tiny_dataset.tile_ids("train")[0])
    times = bundle.observed_times()
    rng = np.random.default_rng(123)
    draws = 10_000
    counts = {t: 0 for t in times}
    for _ in range(draws):
        ex = sample_training_example(bundle, tiny_dataset.region_bounds, rng)
        counts[(ex.day, ex.hour)] += 1
    expected = draws / len(times)
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    critical = stats.chi2.ppf(0.999, df=len(times) - 1)
    assert chi2 < critical


def test_example_masks_consistent(tiny_dataset):
    bundle = tiny_dataset.load_tile(tiny_dataset.tile_ids("train")[0])
    rng = np.random.default_rng(2)
    ex = sample_training_example(bundle, tiny_dataset.region_bounds, rng)
    assert ((ex.road_mask == 1) == (ex.segment_raster != 0)).all()
    assert ((ex.orientation_bins >= 0) == (ex.road_mask == 1)).all()
    assert set(np.unique(ex.segment_raster[ex.valid == 1])) - {0} == set(ex.observations)
    assert (ex.count[ex.valid == 1] >= 1).all()
    assert ex.location_map.min() >= -1.0 - 1e-6
    assert ex.location_map.max() <= 1.0 + 1e-6