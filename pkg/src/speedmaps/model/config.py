"""Model configuration: encoder layout, context pathways, task heads."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

CONTEXT_PATHWAYS = ("loc", "time", "loctime")
TASKS = ("speed", "road", "orientation")


@dataclass
class EncoderConfig:
    """Layer plan of the hybrid convolution/attention encoder.

    Defaults reproduce the full-size network for 1024x1024 inputs; tests use
    narrower plans. ``image_size`` fixes the token grids of the attention
    stages (their relative-position tables depend on it).
    """

    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    stem_channels: tuple[int, int] = (48, 64)
    mbconv_depths: tuple[int, int] = (2, 3)
    mhsa_depths: tuple[int, int] = (5, 2)
    heads: int = 8
    expansion: int = 4
    se_ratio: float = 0.25
    mlp_ratio: int = 4
    image_size: int = 1024

    def validate(self) -> None:
        if len(self.channels) != 4:
            raise ValueError("channels must list four stage widths")
        if self.stem_channels[1] != self.channels[0]:
            raise ValueError("stem output width must equal stage-1 width")
        for c in self.channels[2:]:
            if c % self.heads != 0:
                raise ValueError(f"attention width {c} not divisible by {self.heads} heads")
        if any(d < 1 for d in self.mbconv_depths + self.mhsa_depths):
            raise ValueError("stage depths must be >= 1")
        if self.image_size % 32 != 0:
            raise ValueError("image_size must be divisible by 32")

    @property
    def stage_strides(self) -> tuple[int, int, int, int]:
        return (4, 8, 16, 32)

    def token_grid(self, stage: int) -> int:
        """Token grid side length for attention stage 3 or 4."""
        return self.image_size // self.stage_strides[stage - 1]


@dataclass
class ModelConfig:
    """Full network configuration: encoder, context pathways, task heads."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_dim: int = 512
    dropout: float = 0.1
    orientation_bins: int = 16
    sigma_floor: float = 1e-3
    context: tuple[str, ...] = CONTEXT_PATHWAYS
    tasks: tuple[str, ...] = TASKS
    use_image: bool = True
    gtpe_stride: int = 1
    gtpe_dim: int = 64
    gtpe_hidden: int = 64
    gtpe_loctime_hidden: int = 128

    def validate(self) -> None:
        self.encoder.validate()
        for p in self.context:
            if p not in CONTEXT_PATHWAYS:
                raise ValueError(f"unknown context pathway {p!r}")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
        if not self.tasks:
            raise ValueError("at least one task must be enabled")
        if not self.use_image and not self.context:
            raise ValueError("model needs the image, context, or both as input")
        if self.orientation_bins < 2:
            raise ValueError("orientation_bins must be >= 2")
        if self.gtpe_stride < 1:
            raise ValueError("gtpe_stride must be >= 1")

    @property
    def context_enabled(self) -> bool:
        return bool(self.context)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder")
        enc = {
            k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()
        }
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(encoder=EncoderConfig(**enc), **d)
        cfg.validate()
        return cfg
