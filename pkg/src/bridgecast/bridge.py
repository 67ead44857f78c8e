"""Brownian-bridge forward and reverse operations on video tensors.

Clips are ``[B, C, L, H, W]`` (or unbatched ``[C, L, H, W]``); the frame
axis is third from the right.  Step indices may be a python int (shared by
all frames), a ``[L]`` tensor (per-frame), or ``[B, L]`` (per-sample
per-frame).  Coefficient tables come from :mod:`bridgecast.schedules` and
may be global (1-D) or per-frame (2-D, rescaled variant); they are cast to
the clip's dtype and device on lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "BridgeState",
    "forward_sample",
    "training_target",
    "reconstruct_x0",
    "reverse_step",
    "truncated_start",
]


@dataclass
class BridgeState:
    """A point on the bridge: the noisy clip and the per-frame steps it sits at."""

    x: Tensor
    step: Tensor


def _as_steps(t, x: Tensor) -> Tensor:
    n_frames = x.shape[-3]
    if isinstance(t, (int,)):
        t = torch.full((n_frames,), t, dtype=torch.long, device=x.device)
    elif not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=torch.long, device=x.device)
    if t.dim() == 0:
        t = t.reshape(1).expand(n_frames)
    if t.shape[-1] != n_frames:
        raise ValueError(f"steps last dim {t.shape[-1]} != frame count {n_frames}")
    return t.long()


def _coeff(table, t: Tensor, like: Tensor) -> Tensor:
    """Gather table[t] and shape it to broadcast over the clip."""
    tab = torch.tensor(np.asarray(table), dtype=like.dtype, device=like.device)
    if tab.dim() == 1:
        c = tab[t]
    else:  # per-frame rows
        frames = torch.arange(tab.shape[0], device=like.device).expand(t.shape)
        c = tab[frames, t]
    if like.dim() == 4:
        return c.reshape(1, -1, 1, 1)
    if c.dim() == 1:
        return c.reshape(1, 1, -1, 1, 1)
    return c.reshape(c.shape[0], 1, c.shape[1], 1, 1)


def _check_steps(t: Tensor, total_steps: int, what: str = "t") -> None:
    if t.numel() and (t.min() < 0 or t.max() > total_steps):
        raise ValueError(
            f"{what} out of range [0, {total_steps}]: "
            f"min {int(t.min())}, max {int(t.max())}"
        )


def _check_same_shape(**named: Tensor) -> None:
    shapes = {k: tuple(v.shape) for k, v in named.items()}
    if len(set(shapes.values())) > 1:
        raise ValueError(f"tensor shapes must match, got {shapes}")


def forward_sample(x0: Tensor, x_end: Tensor, t, schedule, noise: Tensor) -> Tensor:
    """Draw x_t from the bridge marginal between x0 and x_end at step t.

    x_t = (1 - mix_t) * x0 + mix_t * x_end + sqrt(var_t) * noise, so t = 0
    returns x0 exactly and t = T returns x_end exactly.
    """
    _check_same_shape(x0=x0, x_end=x_end, noise=noise)
    t = _as_steps(t, x0)
    _check_steps(t, schedule.total_steps)
    m = _coeff(schedule.mix, t, x0)
    v = _coeff(schedule.variance, t, x0)
    return (1.0 - m) * x0 + m * x_end + torch.sqrt(v) * noise


def training_target(x0: Tensor, x_end: Tensor, t, schedule, noise: Tensor) -> Tensor:
    """Regression target for the denoiser at step t.

    target = mix_t * (x_end - x0) + sqrt(var_t) * noise, i.e. exactly
    x_t - x0 for the x_t produced by :func:`forward_sample` with the same
    noise.  The denoiser therefore learns the displacement from the clean
    clip, and subtracting its output from x_t recovers x0.
    """
    _check_same_shape(x0=x0, x_end=x_end, noise=noise)
    t = _as_steps(t, x0)
    _check_steps(t, schedule.total_steps)
    m = _coeff(schedule.mix, t, x0)
    v = _coeff(schedule.variance, t, x0)
    return m * (x_end - x0) + torch.sqrt(v) * noise


def reconstruct_x0(x_t: Tensor, eps_hat: Tensor) -> Tensor:
    """Invert the training parameterization: the clean-clip estimate is x_t - eps_hat."""
    _check_same_shape(x_t=x_t, eps_hat=eps_hat)
    return x_t - eps_hat


def reverse_step(
    x_t: Tensor,
    x0_hat: Tensor,
    x_end: Tensor,
    t,
    t_prev,
    schedule,
    eta: float = 1.0,
    noise: Tensor | None = None,
) -> Tensor:
    """One reverse transition t -> t_prev of the non-Markovian sampler.

    The current state's noise direction d = (x_t - (1 - mix_t) * x0_hat -
    mix_t * x_end) / sqrt(var_t) (defined as 0 where var_t = 0) is carried
    to the earlier step, blended with fresh noise according to eta:

        out = (1 - mix_p) * x0_hat + mix_p * x_end
              + sqrt(var_p - sigma^2) * d + sigma * noise,
        sigma = eta * sqrt(var_p).

    eta = 0 is fully deterministic (noise may be None); eta = 1 redraws the
    full marginal variance.  Steps may differ per frame; positions with
    t == t_prev == 0 are inert placeholders (output there equals x0_hat and
    callers holding finished frames mask it away).

    Raises:
        ValueError: if any position has t_prev > t, or t_prev == t at a
            nonzero step, or eta > 0 with no noise supplied.
    """
    _check_same_shape(x_t=x_t, x0_hat=x0_hat, x_end=x_end)
    t = _as_steps(t, x_t)
    t_prev = _as_steps(t_prev, x_t)
    _check_steps(t, schedule.total_steps)
    _check_steps(t_prev, schedule.total_steps, "t_prev")
    if bool((t_prev > t).any()):
        raise ValueError("t_prev must not exceed t")
    stalled = (t_prev == t) & (t > 0)
    if bool(stalled.any()):
        raise ValueError("t_prev == t is only allowed at step 0")
    if eta > 0.0 and noise is None:
        raise ValueError("eta > 0 requires fresh noise")

    m_t = _coeff(schedule.mix, t, x_t)
    v_t = _coeff(schedule.variance, t, x_t)
    m_p = _coeff(schedule.mix, t_prev, x_t)
    v_p = _coeff(schedule.variance, t_prev, x_t)

    resid = x_t - (1.0 - m_t) * x0_hat - m_t * x_end
    direction = torch.where(
        v_t > 0, resid / torch.sqrt(v_t.clamp_min(torch.finfo(x_t.dtype).tiny)), 0.0
    )
    sigma = eta * torch.sqrt(v_p)
    carry = torch.sqrt((v_p - sigma * sigma).clamp_min(0.0))
    out = (1.0 - m_p) * x0_hat + m_p * x_end + carry * direction
    if eta > 0.0:
        out = out + sigma * noise
    return out


def truncated_start(
    y_hat: Tensor, x_end: Tensor, t_start, schedule, noise: Tensor
) -> BridgeState:
    """Seed the reverse chain partway along the bridge using a forecast y_hat.

    Places the state exactly where the forward marginal would put a clip
    equal to y_hat, so a truncated reverse chain can start at t_start
    instead of the endpoint.
    """
    t = _as_steps(t_start, y_hat)
    x = forward_sample(y_hat, x_end, t, schedule, noise)
    return BridgeState(x=x, step=t)
