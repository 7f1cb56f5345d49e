"""FastAPI app serving a trained checkpoint over a loaded dataset.

The model loads once at startup; requests are serialized around it (CPU
inference, single model instance). Batch operations (synthesis, training,
adaptation) are deliberately not exposed: they are CLI jobs.
"""

from __future__ import annotations

import threading

import numpy as np
from fastapi import FastAPI, HTTPException

from ..apps import (
    aggregate_prediction,
    export_motion_model,
    export_travel_times,
    predict_dense,
    segment_timeseries,
    time_embedding_image,
    uncertainty_curve,
)
from ..data.format import DatasetError, load_dataset
from ..train import load_checkpoint
from ..viz import gray_png_bytes, png_b64, rgb_png_bytes
from . import schemas


def _png_b64(array: np.ndarray, lo: float | None = None, hi: float | None = None) -> str:
    return png_b64(gray_png_bytes(array, lo, hi))


def _rgb_png_b64(array: np.ndarray) -> str:
    return png_b64(rgb_png_bytes(array))


class ModelService:
    """Checkpoint + dataset pair behind a lock for request-serialized inference."""

    def __init__(self, checkpoint_path, dataset_root, device: str = "cpu"):
        self.model, self.payload = load_checkpoint(checkpoint_path, device)
        self.model.eval()
        self.dataset = load_dataset(dataset_root)
        self.device = device
        self.lock = threading.Lock()

    def bundle(self, tile_id: str):
        try:
            return self.dataset.load_tile(tile_id)
        except DatasetError as e:
            raise HTTPException(status_code=404, detail=str(e)) from e

    @property
    def region(self):
        return self.dataset.region_bounds


def create_app(service: ModelService) -> FastAPI:
    app = FastAPI(title="speedmaps", version="0.1.0")
    app.state.service = service

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(
            status="ok",
            city=service.dataset.manifest.city,
            tile_count=len(service.dataset.tile_ids()),
            parameters=service.model.count_parameters()["total"],
        )

    @app.get("/model", response_model=schemas.ModelInfo)
    def model_info() -> schemas.ModelInfo:
        cfg = service.model.cfg
        return schemas.ModelInfo(
            context=list(cfg.context),
            tasks=list(cfg.tasks),
            image_size=cfg.encoder.image_size,
            orientation_bins=cfg.orientation_bins,
            parameter_counts=service.model.count_parameters(),
        )

    @app.get("/tiles", response_model=list[schemas.TileInfo])
    def tiles() -> list[schemas.TileInfo]:
        out = []
        for entry in service.dataset.manifest.tiles:
            bundle = service.bundle(entry.tile_id)
            out.append(
                schemas.TileInfo(
                    id=entry.tile_id,
                    split=entry.split,
                    segment_count=len(bundle.segments),
                    observed_times=len(bundle.observed_times()),
                )
            )
        return out

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest) -> schemas.PredictResponse:
        bundle = service.bundle(req.tile_id)
        with service.lock:
            dense = predict_dense(
                service.model, bundle, service.region, req.day, req.hour, service.device
            )
        estimates = aggregate_prediction(dense, bundle)
        observed = bundle.observations_at(req.day, req.hour)
        rows = []
        for est in estimates:
            obs = observed.get(est.segment_id)
            rows.append(
                schemas.SegmentEstimateOut(
                    segment_id=est.segment_id,
                    mu_kmh=est.mu_bar,
                    sigma_kmh=est.sigma_bar,
                    pixel_count=est.pixel_count,
                    observed_kmh=obs[0] if obs else None,
                    observed_count=obs[1] if obs else None,
                )
            )
        rasters = None
        if req.include_rasters:
            rasters = schemas.RasterBundle(
                mu_png=_png_b64(dense.mu),
                mu_range=(float(dense.mu.min()), float(dense.mu.max())),
                road_png=_png_b64(dense.road_prob, 0.0, 1.0),
                orientation_png=_png_b64(
                    dense.orientation_bins, 0, dense.num_bins - 1
                ),
            )
        return schemas.PredictResponse(
            tile_id=req.tile_id,
            day=req.day,
            hour=req.hour,
            estimates=rows,
            road_fraction=float((dense.road_prob > 0.5).mean()),
            mu_mean_kmh=float(dense.mu.mean()),
            mu_min_kmh=float(dense.mu.min()),
            mu_max_kmh=float(dense.mu.max()),
            rasters=rasters,
        )

    @app.post("/timeseries", response_model=schemas.TimeSeriesResponse)
    def timeseries(req: schemas.TimeSeriesRequest) -> schemas.TimeSeriesResponse:
        bundle = service.bundle(req.tile_id)
        try:
            with service.lock:
                points = segment_timeseries(
                    service.model, bundle, service.region, req.segment_id,
                    service.device,
                )
        except ValueError as e:
            raise HTTPException(status_code=404, detail=str(e)) from e
        return schemas.TimeSeriesResponse(
            tile_id=req.tile_id,
            segment_id=req.segment_id,
            rows=[
                schemas.TimeSeriesPointOut(
                    day=p.day, hour=p.hour, mu_kmh=p.mu_bar, sigma_kmh=p.sigma_bar
                )
                for p in points
            ],
        )

    @app.post("/travel-times", response_model=schemas.TravelTimesResponse)
    def travel_times(req: schemas.TravelTimesRequest) -> schemas.TravelTimesResponse:
        bundle = service.bundle(req.tile_id)
        with service.lock:
            dense = predict_dense(
                service.model, bundle, service.region, req.day, req.hour, service.device
            )
        rows = export_travel_times(dense, bundle)
        return schemas.TravelTimesResponse(
            tile_id=req.tile_id,
            day=req.day,
            hour=req.hour,
            rows=[schemas.TravelTimeRowOut(**vars(r)) for r in rows],
        )

    @app.post("/motion-model")
    def motion_model(req: schemas.MotionModelRequest) -> dict:
        bundle = service.bundle(req.tile_id)
        with service.lock:
            dense = predict_dense(
                service.model, bundle, service.region, req.day, req.hour, service.device
            )
        return export_motion_model(dense, bundle, req.stride, req.road_threshold)

    @app.post("/uncertainty", response_model=schemas.UncertaintyResponse)
    def uncertainty(req: schemas.UncertaintyRequest) -> schemas.UncertaintyResponse:
        bundle = service.bundle(req.tile_id)
        try:
            with service.lock:
                curve = uncertainty_curve(
                    service.model, bundle, service.region,
                    req.segment_id, req.day, req.hour, service.device,
                )
        except ValueError as e:
            raise HTTPException(status_code=404, detail=str(e)) from e
        return schemas.UncertaintyResponse(
            tile_id=req.tile_id,
            segment_id=req.segment_id,
            day=req.day,
            hour=req.hour,
            mu_bar=curve.mu_bar,
            sigma_bar=curve.sigma_bar,
            nu=curve.nu,
            observed_kmh=curve.observed_speed,
            speeds=curve.speeds.tolist(),
            density=curve.density.tolist(),
        )

    @app.get("/time-embedding", response_model=schemas.TimeEmbeddingResponse)
    def time_embedding() -> schemas.TimeEmbeddingResponse:
        try:
            with service.lock:
                emb = time_embedding_image(service.model)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return schemas.TimeEmbeddingResponse(
            matrix=emb.scores.tolist(),
            image_png=_rgb_png_b64(emb.image),
        )

    return app
