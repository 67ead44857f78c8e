"""Deterministic forecasting branch.

An encoder / temporal-translator / decoder stack: frames fold into the
batch axis for spatial encoding and decoding, while the translator folds
them into channels to mix information across time.  The translator's
output doubles as the per-frame conditioning tensor handed to the
diffusion branch, so this module returns both the forecast and those
features.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = ["DeterministicBranch", "db_loss"]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a conv map (channels-last under the hood)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvUnit(nn.Module):
    """Conv3x3 -> LayerNorm -> SiLU, optionally strided."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = ChannelLayerNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return F.silu(self.norm(self.conv(x)))


class Encoder(nn.Module):
    """Four conv units, two of them strided: spatial size drops by 4x."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.stages = nn.Sequential(
            ConvUnit(channels, hidden, stride=1),
            ConvUnit(hidden, hidden, stride=2),
            ConvUnit(hidden, hidden, stride=1),
            ConvUnit(hidden, hidden, stride=2),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(x)


class TranslatorBlock(nn.Module):
    """ConvNeXt-style residual block over the time-folded channel stack."""

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.expand = nn.Linear(dim, 4 * dim)
        self.reduce = nn.Linear(4 * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.dwconv(x).permute(0, 2, 3, 1)
        h = self.reduce(F.gelu(self.expand(self.norm(h))))
        return x + h.permute(0, 3, 1, 2)


class Decoder(nn.Module):
    """Two pixel-shuffle upsampling stages followed by a time-folded readout."""

    def __init__(self, hidden: int, channels: int, out_frames: int):
        super().__init__()
        self.out_frames = out_frames
        self.channels = channels
        self.up = nn.Sequential(
            ConvUnit(hidden, 4 * hidden),
            nn.PixelShuffle(2),
            ConvUnit(hidden, hidden),
            ConvUnit(hidden, 4 * hidden),
            nn.PixelShuffle(2),
            ConvUnit(hidden, hidden),
        )
        self.readout = nn.Conv2d(
            hidden * out_frames, channels * out_frames, 3, padding=1
        )

    def forward(self, h: Tensor, batch: int) -> Tensor:
        h = self.up(h)
        h = h.reshape(batch, -1, *h.shape[-2:])
        return self.readout(h)


class DeterministicBranch(nn.Module):
    """Maps an input clip [B, C, L, H, W] to (forecast, conditioning features).

    The forecast is [B, C, out_frames, H, W]; the conditioning features are
    the translator output reshaped per frame, [B, out_frames, hidden, H/4, W/4].
    H and W must be divisible by 4.
    """

    def __init__(
        self,
        channels: int,
        in_frames: int,
        out_frames: int,
        hidden: int = 64,
        translator_depth: int = 8,
    ):
        super().__init__()
        if channels < 1 or in_frames < 1 or out_frames < 1 or hidden < 1:
            raise ValueError("channels, frame counts and hidden width must be >= 1")
        self.channels = channels
        self.in_frames = in_frames
        self.out_frames = out_frames
        self.hidden = hidden
        self.encoder = Encoder(channels, hidden)
        self.time_proj = (
            nn.Conv2d(hidden * in_frames, hidden * out_frames, 1)
            if in_frames != out_frames
            else None
        )
        self.translator = nn.Sequential(
            *[TranslatorBlock(hidden * out_frames) for _ in range(translator_depth)]
        )
        self.decoder = Decoder(hidden, channels, out_frames)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.dim() != 5:
            raise ValueError(f"expected [B, C, L, H, W], got shape {tuple(x.shape)}")
        b, c, l, hh, ww = x.shape
        if c != self.channels or l != self.in_frames:
            raise ValueError(
                f"clip has C={c}, L={l}; model expects "
                f"C={self.channels}, L={self.in_frames}"
            )
        if hh % 4 or ww % 4:
            raise ValueError(f"H and W must be divisible by 4, got {hh}x{ww}")

        h = self.encoder(x.permute(0, 2, 1, 3, 4).reshape(b * l, c, hh, ww))
        h = h.reshape(b, -1, *h.shape[-2:])  # fold frames into channels
        if self.time_proj is not None:
            h = self.time_proj(h)
        feats = self.translator(h)

        y = self.decoder(
            feats.reshape(b * self.out_frames, self.hidden, *feats.shape[-2:]), b
        )
        y = y.reshape(b, self.out_frames, self.channels, hh, ww).permute(0, 2, 1, 3, 4)
        z = feats.reshape(b, self.out_frames, self.hidden, *feats.shape[-2:])
        return y, z


def db_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Mean-squared forecast error, mean reduction over every element."""
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    return F.mse_loss(y_hat, y)
