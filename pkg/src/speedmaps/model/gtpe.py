"""Geo-temporal positional encoding: three sinusoidal-network pathways
(location, time, location+time) summed into one dense encoding.

The location pathway maps each pixel's normalized world coordinate through a
small sine-activated network; the time pathway encodes the cyclic (day, hour)
parameterization and is broadcast spatially; the joint pathway sees both.
Per-stage fusion (reprojection + resize) lives in :class:`ContextFusion`,
outside this module's parameter set: location adaptation fine-tunes exactly
the pathway weights.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional

import torch
from torch import Tensor, nn

DAYS_PER_WEEK = 7
HOURS_PER_DAY = 24


def cyclic_time_features(day: Tensor, hour: Tensor) -> Tensor:
    """[sin(pi*d), cos(pi*d), sin(pi*h), cos(pi*h)] with d, h scaled to [-1, 1].

    day in 0..6 and hour in 0..23 map to d = 2*day/7 - 1, h = 2*hour/24 - 1;
    the representation is periodic so hour 24 would encode identically to 0.
    """
    day = torch.as_tensor(day)
    hour = torch.as_tensor(hour)
    if ((day < 0) | (day >= DAYS_PER_WEEK)).any():
        raise ValueError("day must lie in 0..6")
    if ((hour < 0) | (hour >= HOURS_PER_DAY)).any():
        raise ValueError("hour must lie in 0..23")
    d = 2.0 * day.to(torch.float32) / DAYS_PER_WEEK - 1.0
    h = 2.0 * hour.to(torch.float32) / HOURS_PER_DAY - 1.0
    return torch.stack(
        [
            torch.sin(math.pi * d),
            torch.cos(math.pi * d),
            torch.sin(math.pi * h),
            torch.cos(math.pi * h),
        ],
        dim=-1,
    )


def location_features(location_map: Tensor) -> Tensor:
    """Lift a [B, 2, H, W] normalized location map to [B, 3, H, W]: (x, y, x*y)."""
    x, y = location_map[:, 0], location_map[:, 1]
    return torch.stack([x, y, x * y], dim=1)


class Siren(nn.Module):
    """Affine map followed by sin(w0 * preactivation)."""

    def __init__(self, fan_in: int, fan_out: int, w0: float, first: bool = False):
        super().__init__()
        self.linear = nn.Linear(fan_in, fan_out)
        self.w0 = w0
        bound = 1.0 / fan_in if first else math.sqrt(6.0 / fan_in) / w0
        nn.init.uniform_(self.linear.weight, -bound, bound)
        nn.init.uniform_(self.linear.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sin(self.w0 * self.linear(x))


class SirenNet(nn.Module):
    """Three sine blocks and a final plain linear layer."""

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        out_dim: int = 64,
        depth: int = 3,
        w0_first: float = 30.0,
        w0_hidden: float = 1.0,
    ):
        super().__init__()
        blocks = [Siren(in_dim, hidden_dim, w0_first, first=True)]
        blocks += [Siren(hidden_dim, hidden_dim, w0_hidden) for _ in range(depth - 1)]
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(hidden_dim, out_dim)
        bound = math.sqrt(6.0 / hidden_dim)
        nn.init.uniform_(self.head.weight, -bound, bound)
        nn.init.uniform_(self.head.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def _apply_pixelwise(net: SirenNet, features: Tensor) -> Tensor:
    """Run a SirenNet over a [B, C, H, W] feature map pixel by pixel."""
    b, c, h, w = features.shape
    flat = features.permute(0, 2, 3, 1).reshape(b * h * w, c)
    out = net(flat)
    return out.reshape(b, h, w, -1).permute(0, 3, 1, 2)


class Gtpe(nn.Module):
    """Sum of the enabled pathway encodings, shaped [B, dim, H, W]."""

    def __init__(
        self,
        pathways: Iterable[str] = ("loc", "time", "loctime"),
        dim: int = 64,
        hidden: int = 64,
        loctime_hidden: int = 128,
    ):
        super().__init__()
        self.pathways = tuple(pathways)
        if not self.pathways:
            raise ValueError("at least one context pathway must be enabled")
        self.dim = dim
        self.loc_net = SirenNet(3, hidden, dim) if "loc" in self.pathways else None
        self.time_net = SirenNet(4, hidden, dim) if "time" in self.pathways else None
        self.loctime_net = (
            SirenNet(7, loctime_hidden, dim) if "loctime" in self.pathways else None
        )

    def forward(
        self,
        location_map: Tensor,
        day: Tensor,
        hour: Tensor,
        enabled: Optional[Iterable[str]] = None,
    ) -> Tensor:
        """``enabled`` restricts to a subset of the constructed pathways."""
        active = self.pathways if enabled is None else tuple(enabled)
        for p in active:
            if p not in self.pathways:
                raise ValueError(f"pathway {p!r} was not constructed")
        b, _, h, w = location_map.shape
        out = location_map.new_zeros((b, self.dim, h, w))
        loc_feats = None
        if "loc" in active or "loctime" in active:
            loc_feats = location_features(location_map)
        if "loc" in active:
            out = out + _apply_pixelwise(self.loc_net, loc_feats)
        time_feats = None
        if "time" in active or "loctime" in active:
            time_feats = cyclic_time_features(day, hour).to(location_map.dtype)
        if "time" in active:
            emb = self.time_net(time_feats)  # [B, dim]
            out = out + emb[:, :, None, None]
        if "loctime" in active:
            joint = torch.cat(
                [loc_feats, time_feats[:, :, None, None].expand(b, 4, h, w)], dim=1
            )
            out = out + _apply_pixelwise(self.loctime_net, joint)
        return out


class ContextFusion(nn.Module):
    """Reproject the encoding to a stage width (3x3 conv), then resize.

    Owned by the network rather than the GTPE module so that adaptation,
    which fine-tunes only the pathway encoders, leaves it frozen.
    """

    def __init__(self, in_dim: int, stage_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_dim, stage_channels, 3, padding=1)

    def forward(self, encoding: Tensor, target_hw: tuple[int, int]) -> Tensor:
        x = self.proj(encoding)
        if x.shape[-2:] != target_hw:
            x = nn.functional.interpolate(
                x, size=target_hw, mode="bilinear", align_corners=False
            )
        return x
