from .format import (
    DatasetError,
    DatasetManifest,
    SpeedDataset,
    TileBundle,
    load_dataset,
    write_dataset,
)
from .synth import SynthSpec, synth_city

__all__ = [
    "DatasetError",
    "DatasetManifest",
    "SpeedDataset",
    "TileBundle",
    "load_dataset",
    "write_dataset",
    "SynthSpec",
    "synth_city",
]
