"""All-linear task decoders over the feature pyramid, plus the task heads.

Each task owns an independent decoder: stage-wise linear unification,
bilinear upsampling to quarter resolution, concatenation (deepest first),
1x1 fusion with BN/ReLU, dropout, a final 1x1 head, and a 4x bilinear
rescale back to the input resolution.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .encoder import FeaturePyramid


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class MlpDecoder(nn.Module):
    def __init__(
        self,
        in_channels: tuple[int, int, int, int],
        dim: int = 512,
        out_channels: int = 1,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.unify = nn.ModuleList(nn.Linear(c, dim) for c in in_channels)
        self.fuse = nn.Sequential(
            nn.Conv2d(4 * dim, dim, 1, bias=False),
            nn.BatchNorm2d(dim),
            nn.ReLU(inplace=True),
        )
        self.dropout = nn.Dropout2d(dropout)
        self.head = nn.Conv2d(dim, out_channels, 1)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        target = pyramid.stage1.shape[-2:]
        unified = []
        for linear, feats in zip(self.unify, pyramid):
            b, c, h, w = feats.shape
            tokens = linear(feats.flatten(2).transpose(1, 2))
            x = tokens.transpose(1, 2).reshape(b, -1, h, w)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            unified.append(x)
        fused = self.fuse(torch.cat(unified[::-1], dim=1))
        out = self.head(self.dropout(fused))
        return F.interpolate(out, scale_factor=4, mode="bilinear", align_corners=False)


class SpeedHead(nn.Module):
    """Two-channel decoder with softplus positivity: per-pixel (mu, sigma).

    sigma picks up a small additive floor so downstream likelihoods never
    see a zero scale. The head bias starts at a typical urban speed prior
    (30 km/h, scale 5): the heavy-tailed likelihood barely pulls on a mu
    initialized near zero, tens of km/h away from any plausible target.
    """

    def __init__(
        self,
        in_channels: tuple[int, int, int, int],
        dim: int = 512,
        dropout: float = 0.1,
        sigma_floor: float = 1e-3,
        init_speed: float = 30.0,
        init_sigma: float = 5.0,
    ):
        super().__init__()
        self.decoder = MlpDecoder(in_channels, dim, out_channels=2, dropout=dropout)
        self.sigma_floor = sigma_floor
        with torch.no_grad():
            self.decoder.head.bias[0] = _inverse_softplus(init_speed)
            self.decoder.head.bias[1] = _inverse_softplus(init_sigma)

    def forward(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
        raw = self.decoder(pyramid)
        mu = F.softplus(raw[:, 0])
        sigma = F.softplus(raw[:, 1]) + self.sigma_floor
        return mu, sigma
