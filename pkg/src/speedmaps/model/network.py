"""Full network: encoder, context encoding/fusion, and the three task heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig
from .decoders import MlpDecoder, SpeedHead
from .encoder import Encoder, FeaturePyramid
from .gtpe import ContextFusion, Gtpe

GTPE_PREFIX = "gtpe."


@dataclass
class ModelOutputs:
    speed_mu: Tensor  # [B, H, W], km/h, >= 0
    speed_sigma: Tensor  # [B, H, W], km/h, >= sigma_floor
    road_logits: Tensor  # [B, H, W]
    orientation_logits: Tensor  # [B, K, H, W]
    pyramid: FeaturePyramid


class TrafficSpeedNet(nn.Module):
    """Dense traffic model: image + geo-temporal context -> three task maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        channels = cfg.encoder.channels
        if cfg.context_enabled:
            self.gtpe = Gtpe(
                cfg.context, cfg.gtpe_dim, cfg.gtpe_hidden, cfg.gtpe_loctime_hidden
            )
            self.fusion3 = ContextFusion(cfg.gtpe_dim, channels[2])
            self.fusion4 = ContextFusion(cfg.gtpe_dim, channels[3])
        else:
            self.gtpe = None
            self.fusion3 = None
            self.fusion4 = None
        self.speed_head = SpeedHead(channels, cfg.decoder_dim, cfg.dropout, cfg.sigma_floor)
        self.road_head = MlpDecoder(channels, cfg.decoder_dim, 1, cfg.dropout)
        self.orientation_head = MlpDecoder(
            channels, cfg.decoder_dim, cfg.orientation_bins, cfg.dropout
        )

    def context_encoding(
        self, location_map: Tensor, day: Tensor, hour: Tensor
    ) -> Tensor:
        """Pathway-sum encoding, computed on a (possibly strided) pixel grid."""
        stride = self.cfg.gtpe_stride
        if stride > 1:
            h, w = location_map.shape[-2:]
            location_map = F.interpolate(
                location_map,
                size=(max(2, h // stride), max(2, w // stride)),
                mode="bilinear",
                align_corners=True,
            )
        return self.gtpe(location_map, day, hour)

    def forward(
        self,
        image: Tensor,
        location_map: Optional[Tensor] = None,
        day: Optional[Tensor] = None,
        hour: Optional[Tensor] = None,
    ) -> ModelOutputs:
        if not self.cfg.use_image:
            image = torch.zeros_like(image)
        pe3 = pe4 = None
        if self.cfg.context_enabled:
            if location_map is None or day is None or hour is None:
                raise ValueError(
                    "context pathways are enabled: location_map, day, and hour are required"
                )
            enc = self.context_encoding(location_map, day, hour)
            size = image.shape[-1]
            pe3 = self.fusion3(enc, (size // 16, size // 16))
            pe4 = self.fusion4(enc, (size // 32, size // 32))
        pyramid = self.encoder(image, pe3, pe4)
        mu, sigma = self.speed_head(pyramid)
        road = self.road_head(pyramid)[:, 0]
        orientation = self.orientation_head(pyramid)
        return ModelOutputs(mu, sigma, road, orientation, pyramid)

    def gtpe_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters of the context pathway encoders (the adaptation set)."""
        if self.gtpe is None:
            return iter(())
        return self.gtpe.parameters()

    def non_gtpe_named_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, p in self.named_parameters():
            if not name.startswith(GTPE_PREFIX):
                yield name, p

    def count_parameters(self) -> dict[str, int]:
        def count(module: Optional[nn.Module]) -> int:
            return sum(p.numel() for p in module.parameters()) if module else 0

        return {
            "encoder": count(self.encoder),
            "gtpe": count(self.gtpe),
            "fusion": count(self.fusion3) + count(self.fusion4),
            "speed_head": count(self.speed_head),
            "road_head": count(self.road_head),
            "orientation_head": count(self.orientation_head),
            "total": count(self),
        }
