"""Hybrid visual encoder: conv stem, two inverted-residual stages, two
global-attention transformer stages with learned relative position bias.

Convolutions followed by a norm carry no bias; attention qkv projections are
bias-free while output/MLP projections keep theirs. Positional encodings from
the context module are added to the tokens of each transformer stage right
after its overlapping patch embedding.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .config import EncoderConfig


class FeaturePyramid(NamedTuple):
    stage1: Tensor  # [B, C1, H/4,  W/4]
    stage2: Tensor  # [B, C2, H/8,  W/8]
    stage3: Tensor  # [B, C3, H/16, W/16]
    stage4: Tensor  # [B, C4, H/32, W/32]


class ConvStem(nn.Module):
    """Three 3x3 convolutions (first stride 2) with BN/ReLU, then 3x3 max pool."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, int] = (48, 64)):
        super().__init__()
        mid, out = widths
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out, 3, padding=1, bias=False),
            nn.BatchNorm2d(out),
            nn.ReLU(inplace=True),
            nn.Conv2d(out, out, 3, padding=1, bias=False),
        )
        self.norm = nn.BatchNorm2d(out)
        self.act = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 4 != 0 or x.shape[-2] % 4 != 0:
            raise ValueError(f"stem input spatial size must be divisible by 4, got {tuple(x.shape)}")
        return self.pool(self.act(self.norm(self.body(x))))


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.act = nn.SiLU(inplace=True)
        self.excite = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)
        s = torch.sigmoid(self.excite(self.act(self.squeeze(s))))
        return x * s


class MBConvBlock(nn.Module):
    """Inverted residual: expand 1x1, depthwise 3x3, squeeze-excite, project 1x1.

    The squeeze-excite hidden width is se_ratio * Cin (not the expanded width);
    the residual applies only when shapes already match, so no shortcut
    projection exists anywhere.
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        stride: int = 1,
        expansion: int = 4,
        se_ratio: float = 0.25,
    ):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        cexp = cin * expansion
        self.expand = nn.Sequential(
            nn.Conv2d(cin, cexp, 1, bias=False),
            nn.BatchNorm2d(cexp),
            nn.SiLU(inplace=True),
        )
        self.depthwise = nn.Sequential(
            nn.Conv2d(cexp, cexp, 3, stride=stride, padding=1, groups=cexp, bias=False),
            nn.BatchNorm2d(cexp),
            nn.SiLU(inplace=True),
        )
        self.se = SqueezeExcite(cexp, max(1, int(se_ratio * cin)))
        self.project = nn.Sequential(
            nn.Conv2d(cexp, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.project(self.se(self.depthwise(self.expand(x))))
        return x + y if self.use_residual else y


class RelativePositionBias(nn.Module):
    """Per-head learned bias over relative token offsets on a 2D grid.

    The index map is built lazily on first use (it is quadratic in token
    count and never needed just to count parameters).
    """

    def __init__(self, grid: int, heads: int):
        super().__init__()
        self.grid = grid
        self.heads = heads
        self.table = nn.Parameter(torch.empty((2 * grid - 1) ** 2, heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        self._index: Optional[Tensor] = None

    def _build_index(self) -> Tensor:
        g = self.grid
        coords = torch.stack(
            torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
        ).flatten(1)  # [2, N]
        rel = coords[:, :, None] - coords[:, None, :]  # [2, N, N]
        rel = rel + (g - 1)
        return (rel[0] * (2 * g - 1) + rel[1]).long()

    def forward(self) -> Tensor:
        if self._index is None or self._index.device != self.table.device:
            self._index = self._build_index().to(self.table.device)
        n = self.grid * self.grid
        return self.table[self._index.reshape(-1)].reshape(n, n, self.heads).permute(2, 0, 1)


class MhsaBlock(nn.Module):
    """Pre-norm global self-attention with relative position bias, then MLP."""

    def __init__(self, dim: int, heads: int, grid: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.pos_bias = RelativePositionBias(grid, heads)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        b, n, c = tokens.shape
        if n != self.pos_bias.grid**2:
            raise ValueError(
                f"{n} tokens but position bias built for a {self.pos_bias.grid}^2 grid; "
                "input size must match the configured image_size"
            )
        qkv = self.qkv(self.norm1(tokens)).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each [B, heads, N, dh]
        attn = (q @ k.transpose(-2, -1)) * self.scale + self.pos_bias().unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        tokens = tokens + self.proj(out)
        return tokens + self.mlp(self.norm2(tokens))


class PatchEmbed(nn.Module):
    """Overlapping patch embedding: 3x3 conv stride 2, then token layer norm."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.LayerNorm(cout)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        x = self.conv(x)
        b, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        return tokens, h, w


class TransformerStage(nn.Module):
    def __init__(self, cin: int, cout: int, depth: int, heads: int, grid: int, mlp_ratio: int):
        super().__init__()
        self.embed = PatchEmbed(cin, cout)
        self.blocks = nn.ModuleList(
            MhsaBlock(cout, heads, grid, mlp_ratio) for _ in range(depth)
        )

    def forward(self, x: Tensor, pe: Optional[Tensor] = None) -> Tensor:
        tokens, h, w = self.embed(x)
        if pe is not None:
            if pe.shape[-2:] != (h, w):
                raise ValueError(
                    f"positional encoding grid {tuple(pe.shape[-2:])} != token grid {(h, w)}"
                )
            tokens = tokens + pe.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)


class Encoder(nn.Module):
    """Stem -> MBConv stage 1 -> MBConv stage 2 (stride 2) -> two MHSA stages."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        self.stem = ConvStem(3, cfg.stem_channels)
        self.stage1 = nn.ModuleList(
            MBConvBlock(c1, c1, 1, cfg.expansion, cfg.se_ratio)
            for _ in range(cfg.mbconv_depths[0])
        )
        blocks2 = [MBConvBlock(c1, c2, 2, cfg.expansion, cfg.se_ratio)]
        blocks2 += [
            MBConvBlock(c2, c2, 1, cfg.expansion, cfg.se_ratio)
            for _ in range(cfg.mbconv_depths[1] - 1)
        ]
        self.stage2 = nn.ModuleList(blocks2)
        self.stage3 = TransformerStage(
            c2, c3, cfg.mhsa_depths[0], cfg.heads, cfg.token_grid(3), cfg.mlp_ratio
        )
        self.stage4 = TransformerStage(
            c3, c4, cfg.mhsa_depths[1], cfg.heads, cfg.token_grid(4), cfg.mlp_ratio
        )

    def forward(
        self,
        image: Tensor,
        pe3: Optional[Tensor] = None,
        pe4: Optional[Tensor] = None,
    ) -> FeaturePyramid:
        if image.shape[-1] % 32 or image.shape[-2] % 32:
            raise ValueError(f"input spatial size must be divisible by 32, got {tuple(image.shape)}")
        x = self.stem(image)
        for block in self.stage1:
            x = block(x)
        s1 = x
        for block in self.stage2:
            x = block(x)
        s2 = x
        s3 = self.stage3(s2, pe3)
        s4 = self.stage4(s3, pe4)
        return FeaturePyramid(s1, s2, s3, s4)

    def zero_position_bias_(self) -> None:
        """Zero all relative position bias tables (diagnostic use)."""
        for m in self.modules():
            if isinstance(m, RelativePositionBias):
                nn.init.zeros_(m.table)
