import numpy as np
import pytest
import torch

from speedmaps.data import SynthSpec, synth_city
from speedmaps.geo import MercatorBounds, OverheadTile, SegmentRecord
from speedmaps.model.config import EncoderConfig, ModelConfig
from speedmaps.train import TrainConfig, train


def tiny_encoder_config(image_size=64, **overrides):
    kwargs = dict(
        channels=(8, 16, 24, 32),
        stem_channels=(8, 8),
        mbconv_depths=(1, 1),
        mhsa_depths=(1, 1),
        heads=4,
        image_size=image_size,
    )
    kwargs.update(overrides)
    return EncoderConfig(**kwargs)


def tiny_model_config(image_size=64, **overrides):
    kwargs = dict(
        encoder=tiny_encoder_config(image_size),
        decoder_dim=32,
        gtpe_dim=16,
        gtpe_hidden=16,
        gtpe_loctime_hidden=24,
        gtpe_stride=4,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def tiny_train_config(**overrides):
    kwargs = dict(
        lr=1e-3,
        epochs=2,
        batch_size=2,
        accum_steps=1,
        seed=0,
        channels=(8, 16, 24, 32),
        stem_channels=(8, 8),
        mbconv_depths=(1, 1),
        mhsa_depths=(1, 1),
        heads=4,
        decoder_dim=32,
        gtpe_stride=4,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def square_tile(size=32, resolution=1.0, origin=(0.0, 0.0), tile_id="t") -> OverheadTile:
    e0, n0 = origin
    extent = size * resolution
    return OverheadTile(
        id=tile_id,
        image=np.zeros((3, size, size), dtype=np.float32),
        bounds=MercatorBounds(e0, e0 + extent, n0, n0 + extent),
        resolution=resolution,
    )


def segment(seg_id, points, observations=None) -> SegmentRecord:
    seg = SegmentRecord(
        segment_id=seg_id,
        polyline=[(float(x), float(y)) for x, y in points],
        observations=observations or {},
    )
    seg.validate()
    return seg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six 64px tiles; small but exercises all splits."""
    root = tmp_path_factory.mktemp("tiny_city")
    spec = SynthSpec(seed=11, tiles=6, tile_size=64, resolution=2.4)
    return synth_city(spec, root)


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory, tiny_dataset):
    """A briefly trained checkpoint on the tiny dataset, shared across tests."""
    out = tmp_path_factory.mktemp("toy_run")
    config = tiny_train_config(epochs=3)
    result = train(config, tiny_dataset, out)
    return {"result": result, "dataset": tiny_dataset, "config": config}
