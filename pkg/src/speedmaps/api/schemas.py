"""Request/response models for the model-serving API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    city: str
    tile_count: int
    parameters: int


class ModelInfo(BaseModel):
    context: list[str]
    tasks: list[str]
    image_size: int
    orientation_bins: int
    parameter_counts: dict[str, int]


class TileInfo(BaseModel):
    id: str
    split: str
    segment_count: int
    observed_times: int


class PredictRequest(BaseModel):
    tile_id: str
    day: int = Field(ge=0, le=6)
    hour: int = Field(ge=0, le=23)
    include_rasters: bool = False


class SegmentEstimateOut(BaseModel):
    segment_id: int
    mu_kmh: float
    sigma_kmh: float
    pixel_count: int
    observed_kmh: float | None = None
    observed_count: int | None = None


class RasterBundle(BaseModel):
    """Normalized grayscale PNGs (base64) with their value ranges."""

    mu_png: str
    mu_range: tuple[float, float]
    road_png: str
    orientation_png: str


class PredictResponse(BaseModel):
    tile_id: str
    day: int
    hour: int
    estimates: list[SegmentEstimateOut]
    road_fraction: float
    mu_mean_kmh: float
    mu_min_kmh: float
    mu_max_kmh: float
    rasters: RasterBundle | None = None


class TimeSeriesRequest(BaseModel):
    tile_id: str
    segment_id: int


class TimeSeriesPointOut(BaseModel):
    day: int
    hour: int
    mu_kmh: float
    sigma_kmh: float


class TimeSeriesResponse(BaseModel):
    tile_id: str
    segment_id: int
    rows: list[TimeSeriesPointOut]


class TravelTimesRequest(BaseModel):
    tile_id: str
    day: int = Field(ge=0, le=6)
    hour: int = Field(ge=0, le=23)


class TravelTimeRowOut(BaseModel):
    segment_id: int
    length_m: float
    mu_bar_kmh: float
    travel_seconds: float
    clamped: bool


class TravelTimesResponse(BaseModel):
    tile_id: str
    day: int
    hour: int
    rows: list[TravelTimeRowOut]


class MotionModelRequest(BaseModel):
    tile_id: str
    day: int = Field(ge=0, le=6)
    hour: int = Field(ge=0, le=23)
    stride: int = Field(default=8, ge=1)
    road_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class UncertaintyRequest(BaseModel):
    tile_id: str
    segment_id: int
    day: int = Field(ge=0, le=6)
    hour: int = Field(ge=0, le=23)


class UncertaintyResponse(BaseModel):
    tile_id: str
    segment_id: int
    day: int
    hour: int
    mu_bar: float
    sigma_bar: float
    nu: int
    observed_kmh: float
    speeds: list[float]
    density: list[float]


class TimeEmbeddingResponse(BaseModel):
    matrix: list[list[list[float]]]  # 7 x 24 x 3 PCA scores
    image_png: str  # 7 x 24 false-color PNG, base64
