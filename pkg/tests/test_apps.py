import math

import numpy as np
import pytest
import torch
from scipy import integrate

from speedmaps.apps import (
    aggregate_prediction,
    export_motion_model,
    export_travel_times,
    predict_dense,
    segment_timeseries,
    time_embedding_image,
    uncertainty_curve,
    DensePrediction,
)
from speedmaps.train import load_checkpoint


@pytest.fixture(scope="module")
def toy_model(trained_toy):
    model, _ = load_checkpoint(trained_toy["result"].best_checkpoint)
    return model


@pytest.fixture(scope="module")
def toy_bundle(trained_toy):
    ds = trained_toy["dataset"]
    return ds, ds.load_tile(ds.tile_ids("train")[0])


def test_predict_dense_outputs(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    dense = predict_dense(toy_model, bundle, ds.region_bounds, 0, 8)
    size = bundle.tile.size
    assert dense.mu.shape == (size, size)
    assert dense.sigma.shape == (size, size)
    assert np.isfinite(dense.mu).all() and np.isfinite(dense.sigma).all()
    assert (dense.mu >= 0).all()
    assert (dense.road_prob > 0).all() and (dense.road_prob < 1).all()
    assert dense.orientation_bins.min() >= 0
    assert dense.orientation_bins.max() < 16


def test_predict_dense_sensitive_to_hour(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    at_4 = predict_dense(toy_model, bundle, ds.region_bounds, 0, 4)
    at_17 = predict_dense(toy_model, bundle, ds.region_bounds, 0, 17)
    assert not np.array_equal(at_4.mu, at_17.mu)


def test_predict_dense_aggregation_overlay(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    dense = predict_dense(toy_model, bundle, ds.region_bounds, 0, 8)
    estimates = aggregate_prediction(dense, bundle)
    raster = bundle.label_masks().segment_raster
    present = set(np.unique(raster)) - {0}
    assert {e.segment_id for e in estimates} == present
    for est in estimates:
        mask = raster == est.segment_id
        assert est.mu_bar == pytest.approx(dense.mu[mask].mean(), rel=1e-5)


def test_timeseries_168_rows(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    seg_id = bundle.segments[0].segment_id
    points = segment_timeseries(toy_model, bundle, ds.region_bounds, seg_id)
    assert len(points) == 168
    assert [(p.day, p.hour) for p in points] == [
        (d, h) for d in range(7) for h in range(24)
    ]
    assert all(math.isfinite(p.mu_bar) and p.sigma_bar > 0 for p in points)


def test_timeseries_matches_predict_dense_composition(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    seg_id = bundle.segments[0].segment_id
    points = segment_timeseries(toy_model, bundle, ds.region_bounds, seg_id)
    dense = predict_dense(toy_model, bundle, ds.region_bounds, 2, 13)
    est = {e.segment_id: e for e in aggregate_prediction(dense, bundle)}[seg_id]
    point = next(p for p in points if (p.day, p.hour) == (2, 13))
    assert point.mu_bar == pytest.approx(est.mu_bar, rel=1e-4)
    assert point.sigma_bar == pytest.approx(est.sigma_bar, rel=1e-4)


def test_timeseries_unknown_segment(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    with pytest.raises(ValueError):
        segment_timeseries(toy_model, bundle, ds.region_bounds, 999_999)


# ---------------------------------------------------------------- motion model


def _fake_dense(size=32, road_value=0.9):
    rng = np.random.default_rng(0)
    return DensePrediction(
        tile_id="t",
        day=0,
        hour=8,
        mu=rng.uniform(5, 50, (size, size)).astype(np.float32),
        sigma=np.ones((size, size), dtype=np.float32),
        road_prob=np.full((size, size), road_value, dtype=np.float32),
        orientation_bins=rng.integers(0, 16, (size, size)).astype(np.int32),
        num_bins=16,
    )


def test_motion_model_empty_when_no_road(toy_bundle):
    _, bundle = toy_bundle
    dense = _fake_dense(size=bundle.tile.size, road_value=0.01)
    geo = export_motion_model(dense, bundle, stride=8)
    assert geo["type"] == "FeatureCollection"
    assert geo["features"] == []


def test_motion_model_arrows(toy_bundle):
    _, bundle = toy_bundle
    size = bundle.tile.size
    dense = _fake_dense(size=size, road_value=0.9)
    stride = 8
    geo = export_motion_model(dense, bundle, stride=stride)
    grid_points = len(range(stride // 2, size, stride)) ** 2
    assert 0 < len(geo["features"]) <= grid_points
    for feat in geo["features"]:
        bearing = feat["properties"]["bearing_deg"]
        assert bearing == pytest.approx((bearing // 22.5) * 22.5)
        assert 0 <= bearing < 360
        e, n = feat["geometry"]["coordinates"]
        assert bundle.tile.bounds.easting_min <= e <= bundle.tile.bounds.easting_max
        assert bundle.tile.bounds.northing_min <= n <= bundle.tile.bounds.northing_max


# ---------------------------------------------------------------- travel times


def test_travel_times_hand_values(toy_bundle):
    _, bundle = toy_bundle
    size = bundle.tile.size
    dense = _fake_dense(size=size)
    raster = bundle.label_masks().segment_raster
    # paint each segment's pixels with a constant speed of 36 km/h
    dense.mu = np.where(raster != 0, 36.0, 5.0).astype(np.float32)
    rows = export_travel_times(dense, bundle)
    assert {r.segment_id for r in rows} == set(np.unique(raster)) - {0}
    by_id = {r.segment_id: r for r in rows}
    for seg in bundle.segments:
        if seg.segment_id not in by_id:
            continue
        row = by_id[seg.segment_id]
        assert row.mu_bar_kmh == pytest.approx(36.0, rel=1e-6)
        # 36 km/h = 10 m/s: seconds == length / 10
        assert row.travel_seconds == pytest.approx(3.6 * row.length_m / 36.0, rel=1e-9)
        assert row.length_m == pytest.approx(seg.length(), rel=1e-9)
        assert not row.clamped


def test_travel_times_clamps_tiny_speeds(toy_bundle):
    _, bundle = toy_bundle
    dense = _fake_dense(size=bundle.tile.size)
    dense.mu = np.full_like(dense.mu, 1e-6)
    rows = export_travel_times(dense, bundle)
    assert rows and all(r.clamped for r in rows)
    for r in rows:
        assert r.travel_seconds == pytest.approx(3.6 * r.length_m / 0.1, rel=1e-9)


def test_travel_times_totals_match_hand_sum(toy_bundle):
    _, bundle = toy_bundle
    dense = _fake_dense(size=bundle.tile.size)
    rows = export_travel_times(dense, bundle)
    raster = bundle.label_masks().segment_raster
    expect_total = 0.0
    for seg in bundle.segments:
        mask = raster == seg.segment_id
        if not mask.any():
            continue
        mu = max(float(dense.mu[mask].mean()), 0.1)
        expect_total += 3.6 * seg.length() / mu
    assert sum(r.travel_seconds for r in rows) == pytest.approx(expect_total, rel=1e-5)


# ---------------------------------------------------------------- embeddings


def test_time_embedding_shape_and_orthogonality(toy_model):
    emb = time_embedding_image(toy_model)
    assert emb.scores.shape == (7, 24, 3)
    assert emb.image.shape == (7, 24, 3)
    assert emb.image.min() >= 0.0 and emb.image.max() <= 1.0
    gram = emb.components @ emb.components.T
    assert np.allclose(gram, np.eye(3), atol=1e-6)


def test_time_embedding_deterministic_sign(toy_model):
    a = time_embedding_image(toy_model)
    b = time_embedding_image(toy_model)
    assert np.array_equal(a.scores, b.scores)
    for k in range(3):
        lead = np.argmax(np.abs(a.components[k]))
        assert a.components[k][lead] > 0


def test_time_embedding_requires_time_pathway(trained_toy, tmp_path, tiny_dataset):
    from speedmaps.train import train
    from conftest import tiny_train_config

    cfg = tiny_train_config(epochs=1, context=("loc",))
    result = train(cfg, tiny_dataset, tmp_path / "loc_only")
    model, _ = load_checkpoint(result.best_checkpoint)
    with pytest.raises(ValueError):
        time_embedding_image(model)


# ---------------------------------------------------------------- uncertainty


def _observed_segment(bundle):
    for seg in bundle.segments:
        if seg.observations:
            (d, h), (y, nu) = next(iter(sorted(seg.observations.items())))
            return seg.segment_id, d, h, y, nu
    raise AssertionError("fixture bundle has no observations")


def test_uncertainty_curve_samples(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    seg_id, d, h, y, nu = _observed_segment(bundle)
    curve = uncertainty_curve(toy_model, bundle, ds.region_bounds, seg_id, d, h)
    assert len(curve.speeds) == 241
    assert curve.speeds[0] == 0.0 and curve.speeds[-1] == 120.0
    assert curve.observed_speed == y
    assert curve.nu == nu
    # peak at the aggregated mu (within the tabulated window)
    peak = curve.speeds[np.argmax(curve.density)]
    assert abs(peak - curve.mu_bar) <= 0.5 or curve.mu_bar > 120.0
    # pointwise oracle: the tabulated values are the scaled-t density
    from scipy import stats

    reference = stats.t.pdf(
        (curve.speeds - curve.mu_bar) / curve.sigma_bar, df=curve.nu
    ) / curve.sigma_bar
    assert np.allclose(curve.density, reference, rtol=1e-5, atol=1e-9)
    # and the curve integrates to the analytic windowed mass, up to the
    # 0.5 km/h trapezoid discretization
    mass = np.trapezoid(curve.density, curve.speeds)
    analytic = stats.t.cdf(
        (120.0 - curve.mu_bar) / curve.sigma_bar, df=curve.nu
    ) - stats.t.cdf((0.0 - curve.mu_bar) / curve.sigma_bar, df=curve.nu)
    assert mass == pytest.approx(analytic, abs=0.02)


def test_uncertainty_requires_observation(toy_model, toy_bundle):
    ds, bundle = toy_bundle
    seg = bundle.segments[0]
    missing = next(
        (d, h)
        for d in range(7)
        for h in range(24)
        if (d, h) not in seg.observations
    )
    with pytest.raises(ValueError):
        uncertainty_curve(
            toy_model, bundle, ds.region_bounds, seg.segment_id, *missing
        )
