"""Ensemble forecasting via truncated guided reverse diffusion.

The deterministic branch runs once per input clip; its forecast seeds the
reverse chain partway along the bridge (truncation) and its features
condition the denoiser.  Each ensemble member owns an RNG stream derived
from (seed, member index), so a member's sample is reproducible regardless
of how members are batched together.

Frames may follow different chain lengths: every frame starts at its own
grid head immediately and frames that reach step 0 early are held fixed
while the rest finish (the denoiser still sees them as context at step 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from bridgecast.bridge import reconstruct_x0, reverse_step, truncated_start
from bridgecast.data import replicate_last_frame
from bridgecast.schedules import BridgeSchedule, FrameSchedule, make_frame_grids
from bridgecast.training import _seeded_generator

__all__ = ["ForecastEnsemble", "sample_forecast"]

MEMBER_STREAM_TAG = 3  # keep member streams disjoint from training streams


@dataclass
class ForecastEnsemble:
    """Ensemble forecast for one input clip, in normalized units."""

    samples: np.ndarray  # [K, C, L_out, H, W]
    deterministic: np.ndarray | None
    provenance: dict

    def __post_init__(self):
        if self.samples is not None and self.samples.ndim != 5:
            raise ValueError("samples must be [K, C, L, H, W]")


def _as_clip(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if t.dim() != 4:
        raise ValueError(f"input clip must be [C, L, H, W], got {tuple(t.shape)}")
    return t


def sample_forecast(
    x,
    db,
    pb,
    schedule: BridgeSchedule,
    frames: FrameSchedule,
    n_steps: int,
    eta: float = 1.0,
    truncation_fraction: float = 0.5,
    n_samples: int = 20,
    seed: int = 0,
    endpoint: str = "last-frame",
    tables=None,
    sample_batch: int = 8,
) -> ForecastEnsemble:
    """Draw an ensemble of forecasts for one input clip [C, L, H, W].

    Without a deterministic branch there is no forecast to seed the chain
    or stagger frames with, so ``truncation_fraction`` must be 0 and the
    frame schedule uniform.

    Returns normalized-space samples plus provenance describing exactly how
    they were produced (grids, truncation, per-member denoiser work).
    """
    if pb is None:
        raise ValueError("sampling requires the diffusion branch")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if db is None and truncation_fraction > 0:
        raise ValueError("truncation requires the deterministic branch")
    if db is None and frames.step_size != 0:
        raise ValueError("per-frame chain lengths require the deterministic branch")

    x = _as_clip(x)
    coeffs = tables if tables is not None else schedule
    grids = make_frame_grids(frames, n_steps, eta, truncation_fraction)
    step_lists = [g.truncated_steps for g in grids]
    horizon = frames.horizon
    max_transitions = max(len(s) - 1 for s in step_lists)
    heads = torch.tensor([int(s[0]) for s in step_lists])
    planned_evals = sum(len(s) - 1 for s in step_lists)

    pb_mode, db_mode = pb.training, db.training if db is not None else False
    pb.eval()
    y_hat = z = None
    with torch.no_grad():
        if db is not None:
            db.eval()
            y_hat_t, z = db(x.unsqueeze(0))
            y_hat = y_hat_t[0]

        out_shape = (x.shape[0], horizon, x.shape[2], x.shape[3])
        if endpoint == "last-frame":
            shared_end = replicate_last_frame(x, horizon)
        elif endpoint == "input":
            if x.shape[1] != horizon:
                raise ValueError("endpoint 'input' needs input length == horizon")
            shared_end = x
        elif endpoint == "noise":
            shared_end = None  # drawn per member
        else:
            raise ValueError(f"unknown endpoint mode {endpoint!r}")

        def steps_at(k: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
            cur, nxt, act = [], [], []
            for s in step_lists:
                last = len(s) - 1
                cur.append(int(s[min(k, last)]))
                nxt.append(int(s[min(k + 1, last)]))
                act.append(k < last)
            return (
                torch.tensor(cur), torch.tensor(nxt),
                torch.tensor(act, dtype=torch.bool),
            )

        samples = []
        executed_evals = 0
        for chunk_lo in range(0, n_samples, sample_batch):
            members = range(chunk_lo, min(chunk_lo + sample_batch, n_samples))
            gens = [_seeded_generator(seed, MEMBER_STREAM_TAG, m) for m in members]

            ends, starts = [], []
            for g in gens:
                end = (
                    torch.randn(out_shape, generator=g)
                    if shared_end is None
                    else shared_end
                )
                start_noise = torch.randn(out_shape, generator=g)
                seed_clip = y_hat if y_hat is not None else end
                state = truncated_start(seed_clip, end, heads, coeffs, start_noise)
                ends.append(end)
                starts.append(state.x)
            x_end = torch.stack(ends)
            x_state = torch.stack(starts)
            z_batch = z.expand(len(x_state), -1, -1, -1, -1) if z is not None else None

            for k in range(max_transitions):
                t_cur, t_nxt, active = steps_at(k)
                eps = pb(x_state, t_cur.to(torch.float32), z_batch)
                x0_hat = reconstruct_x0(x_state, eps)
                fresh = (
                    torch.stack([torch.randn(out_shape, generator=g) for g in gens])
                    if eta > 0
                    else None
                )
                stepped = reverse_step(
                    x_state, x0_hat, x_end, t_cur, t_nxt, coeffs, eta, fresh
                )
                mask = active.reshape(1, 1, -1, 1, 1)
                x_state = torch.where(mask, stepped, x_state)
                executed_evals += int(active.sum()) * len(gens)
            samples.append(x_state)

        ensemble = torch.cat(samples).numpy()

    pb.train(pb_mode)
    if db is not None:
        db.train(db_mode)
    assert executed_evals == planned_evals * n_samples

    provenance = {
        "seed": seed,
        "n_samples": n_samples,
        "eta": eta,
        "truncation_fraction": truncation_fraction,
        "n_steps": n_steps,
        "total_steps": schedule.total_steps,
        "endpoint": endpoint,
        "frame_steps": frames.steps_per_frame.tolist(),
        "frame_schedule_step_size": frames.step_size,
        "rescaled_tables": tables is not None,
        "grid_heads": heads.tolist(),
        "retained_transitions": [len(s) - 1 for s in step_lists],
        "denoiser_frame_evals": planned_evals,
    }
    return ForecastEnsemble(
        samples=ensemble,
        deterministic=y_hat.numpy() if y_hat is not None else None,
        provenance=provenance,
    )
