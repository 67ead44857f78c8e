"""Conditional video denoiser for the diffusion branch.

A four-level 3D UNet over clips [B, C, L, H, W].  All convolutions are
spatial (kernel 1 on the frame axis); information moves across frames only
through temporal self-attention, so each frame can sit at its own diffusion
step.  Spatial attention layers cross-attend to the deterministic branch's
per-frame conditioning features when they are present and fall back to
self-attention otherwise.  H and W must be divisible by 8.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = ["VideoDenoiser"]


def sinusoidal_step_embedding(t: Tensor, dim: int) -> Tensor:
    """Classic sin/cos features of the (per-frame) diffusion step, shape [..., dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / (half - 1)
    )
    args = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FrameTimeEmbed(nn.Module):
    def __init__(self, sin_dim: int, emb_dim: int):
        super().__init__()
        self.sin_dim = sin_dim
        self.mlp = nn.Sequential(
            nn.Linear(sin_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_step_embedding(t, self.sin_dim))


class ResBlock3d(nn.Module):
    """GroupNorm-SiLU-Conv twice, with a per-frame step-embedding shift."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, (1, 3, 3), padding=(0, 1, 1))
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, (1, 3, 3), padding=(0, 1, 1))
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb).permute(0, 2, 1)[..., None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    b, n, c = q.shape
    hd = c // heads
    q, k, v = (
        u.reshape(u.shape[0], u.shape[1], heads, hd).transpose(1, 2) for u in (q, k, v)
    )
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(1, 2).reshape(b, n, c)


class SpatialAttention(nn.Module):
    """Per-frame attention over pixels; cross-attends to conditioning tokens if given."""

    def __init__(self, ch: int, heads: int, cond_ch: int = 0):
        super().__init__()
        self.heads = heads
        self.cond_ch = cond_ch
        src = cond_ch if cond_ch else ch
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(src, ch, bias=False)
        self.to_v = nn.Linear(src, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x: Tensor, cond_tokens: Tensor | None) -> Tensor:
        b, c, l, hh, ww = x.shape
        h = self.norm(x).permute(0, 2, 3, 4, 1).reshape(b * l, hh * ww, c)
        src = cond_tokens if self.cond_ch else h
        out = _attend(self.to_q(h), self.to_k(src), self.to_v(src), self.heads)
        out = self.proj(out).reshape(b, l, hh, ww, c).permute(0, 4, 1, 2, 3)
        return x + out


class TemporalAttention(nn.Module):
    """Self-attention across frames at every spatial position."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x: Tensor) -> Tensor:
        b, c, l, hh, ww = x.shape
        h = self.norm(x).permute(0, 3, 4, 2, 1).reshape(b * hh * ww, l, c)
        out = _attend(self.to_q(h), self.to_k(h), self.to_v(h), self.heads)
        out = self.proj(out)
        out = out.reshape(b, hh, ww, l, c).permute(0, 4, 3, 1, 2)
        return x + out


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv3d(ch, ch, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.ConvTranspose3d(
            ch, ch, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class CondBlock(nn.Module):
    """Projects conditioning features to the base width, two conv units."""

    def __init__(self, cond_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cond_ch, out_ch, 3, padding=1),
            nn.GroupNorm(8, out_ch),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(8, out_ch),
            nn.SiLU(),
        )

    def forward(self, z: Tensor) -> Tensor:
        b, l, c, hh, ww = z.shape
        out = self.net(z.reshape(b * l, c, hh, ww))
        return out.reshape(b, l, -1, hh, ww)


class Stage(nn.Module):
    """One UNet level: two residual blocks, spatial + temporal attention, resampling."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        emb_dim: int,
        heads: int,
        cond_ch: int,
        resample: nn.Module | None,
        temporal: bool,
    ):
        super().__init__()
        self.res1 = ResBlock3d(in_ch, out_ch, emb_dim)
        self.res2 = ResBlock3d(out_ch, out_ch, emb_dim)
        self.satt = SpatialAttention(out_ch, heads, cond_ch)
        self.tatt = TemporalAttention(out_ch, heads) if temporal else None
        self.resample = resample

    def forward(self, x, emb, cond_tokens):
        h = self.res2(self.res1(x, emb), emb)
        h = self.satt(h, cond_tokens)
        if self.tatt is not None:
            h = self.tatt(h)
        return h, (self.resample(h) if self.resample is not None else h)


class VideoDenoiser(nn.Module):
    """Predicts the bridge displacement for a noisy clip at per-frame steps.

    Args:
        channels: clip channels C.
        cond_channels: channel width of the conditioning features; 0 makes the
            model unconditional (spatial attention becomes self-attention).
        base_width: channel width at full resolution (divisible by 8 and heads).
        multipliers: four per-level width multipliers.
        temporal_attention: disable to make the model act frame-independently
            (diagnostic ablation; frames then never exchange information).
    """

    def __init__(
        self,
        channels: int,
        cond_channels: int = 0,
        base_width: int = 64,
        multipliers: tuple[int, ...] = (1, 2, 4, 8),
        sin_dim: int = 64,
        emb_dim: int = 256,
        heads: int = 4,
        temporal_attention: bool = True,
    ):
        super().__init__()
        if len(multipliers) != 4:
            raise ValueError("exactly four level multipliers are required")
        if base_width % 8 or base_width % heads:
            raise ValueError("base_width must be divisible by 8 and by heads")
        self.channels = channels
        self.cond_channels = cond_channels
        self.base_width = base_width
        widths = [base_width * m for m in multipliers]

        self.stem = nn.Conv3d(channels, base_width, (1, 7, 7), padding=(0, 3, 3))
        self.stem_tatt = (
            TemporalAttention(base_width, heads) if temporal_attention else None
        )
        self.time_embed = FrameTimeEmbed(sin_dim, emb_dim)
        self.cond_block = (
            CondBlock(cond_channels, base_width) if cond_channels else None
        )

        def stage(i, o, resample):
            return Stage(
                i, o, emb_dim, heads,
                base_width if cond_channels else 0,
                resample, temporal_attention,
            )

        self.downs = nn.ModuleList(
            [
                stage(base_width, widths[0], Downsample(widths[0])),
                stage(widths[0], widths[1], Downsample(widths[1])),
                stage(widths[1], widths[2], Downsample(widths[2])),
                stage(widths[2], widths[3], None),
            ]
        )
        self.mid = stage(widths[3], widths[3], None)
        self.ups = nn.ModuleList(
            [
                stage(widths[3] * 2, widths[2], Upsample(widths[2])),
                stage(widths[2] * 2, widths[1], Upsample(widths[1])),
                stage(widths[1] * 2, widths[0], Upsample(widths[0])),
                stage(widths[0] * 2, base_width, None),
            ]
        )
        out_in = base_width * (3 if cond_channels else 2)
        self.out_res = ResBlock3d(out_in, base_width, emb_dim)
        self.out_conv = nn.Conv3d(base_width, channels, 1)

    def _frame_steps(self, t, x: Tensor) -> Tensor:
        b, l = x.shape[0], x.shape[2]
        if isinstance(t, (int, float)):
            t = torch.full((b, l), float(t), device=x.device)
        elif not torch.is_tensor(t):
            t = torch.as_tensor(t, device=x.device)
        t = t.to(device=x.device, dtype=x.dtype)
        if t.dim() == 0:
            t = t.reshape(1, 1).expand(b, l)
        elif t.dim() == 1:
            if t.shape[0] != l:
                raise ValueError(f"per-frame steps length {t.shape[0]} != L={l}")
            t = t.unsqueeze(0).expand(b, l)
        elif t.shape != (b, l):
            raise ValueError(f"steps shape {tuple(t.shape)} incompatible with [{b}, {l}]")
        return t

    def forward(self, x_t: Tensor, t, z: Tensor | None = None) -> Tensor:
        if x_t.dim() != 5:
            raise ValueError(f"expected [B, C, L, H, W], got {tuple(x_t.shape)}")
        b, c, l, hh, ww = x_t.shape
        if c != self.channels:
            raise ValueError(f"clip has {c} channels, model expects {self.channels}")
        if hh % 8 or ww % 8:
            raise ValueError(f"H and W must be divisible by 8, got {hh}x{ww}")
        if (z is None) != (self.cond_block is None):
            raise ValueError(
                "conditioning mismatch: pass z exactly when the model is conditional"
            )

        emb = self.time_embed(self._frame_steps(t, x_t))

        cond_tokens = cond_full = None
        if z is not None:
            if z.shape[:2] != (b, l) or z.shape[2] != self.cond_channels:
                raise ValueError(
                    f"conditioning shape {tuple(z.shape)} incompatible with clip"
                )
            if z.shape[-2:] != (hh // 4, ww // 4):
                raise ValueError("conditioning must live at quarter resolution")
            cond = self.cond_block(z)  # [B, L, base, H/4, W/4]
            cond_tokens = cond.flatten(0, 1).flatten(2).transpose(1, 2)
            cond_full = (
                F.interpolate(cond.flatten(0, 1), scale_factor=4, mode="nearest")
                .reshape(b, l, self.base_width, hh, ww)
                .permute(0, 2, 1, 3, 4)
            )

        h = self.stem(x_t)
        if self.stem_tatt is not None:
            h = self.stem_tatt(h)
        stem_skip = h

        skips = []
        for down in self.downs:
            skip, h = down(h, emb, cond_tokens)
            skips.append(skip)

        _, h = self.mid(h, emb, cond_tokens)

        for up, skip in zip(self.ups, reversed(skips)):
            _, h = up(torch.cat([h, skip], dim=1), emb, cond_tokens)

        parts = [h, stem_skip] + ([cond_full] if cond_full is not None else [])
        h = self.out_res(torch.cat(parts, dim=1), emb)
        return self.out_conv(h)
