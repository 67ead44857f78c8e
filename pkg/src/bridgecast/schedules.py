"""Diffusion step schedules.

Three related pieces live here:

* :class:`BridgeSchedule` -- the closed-form mixing / variance tables of the
  Brownian bridge between a clean clip and its chain endpoint,
* :class:`FrameSchedule` -- the per-frame step budgets that give later
  forecast frames a longer (noisier) chain than earlier ones,
* :class:`ReverseGrid` -- the descending step grid a sampler walks, with
  optional truncation so the chain can start from a guided intermediate
  state instead of the endpoint.

All tables are float64 numpy arrays, computed once and frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BridgeSchedule",
    "FrameSchedule",
    "FramewiseBridgeTables",
    "ReverseGrid",
    "make_bridge_schedule",
    "make_frame_schedule",
    "default_frame_step_size",
    "make_reverse_grid",
    "make_frame_grids",
    "framewise_rescaled",
]


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BridgeSchedule:
    """Closed-form bridge coefficients indexed by step t in [0, T].

    ``mix[t]`` is the fraction of the endpoint mixed into the state at step
    t and ``variance[t]`` the marginal noise variance there.  Both ends are
    pinned: mix 0 -> 1, variance 0 at t = 0 and t = T, peak 0.5 at T/2.
    """

    total_steps: int
    mix: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.mix.shape != (self.total_steps + 1,):
            raise ValueError("mix table must have total_steps + 1 entries")
        if self.variance.shape != self.mix.shape:
            raise ValueError("variance table must match mix table shape")


def make_bridge_schedule(total_steps: int) -> BridgeSchedule:
    """Build the bridge schedule for a chain of ``total_steps`` steps.

    mix[t] = t / T and variance[t] = 2 * (mix[t] - mix[t]^2), so the
    variance is symmetric around T/2 and exactly zero at both ends.

    Raises:
        ValueError: if ``total_steps`` is not an integer >= 2.
    """
    if not isinstance(total_steps, (int, np.integer)) or isinstance(total_steps, bool):
        raise ValueError(f"total_steps must be an integer, got {total_steps!r}")
    if total_steps < 2:
        raise ValueError(f"total_steps must be >= 2, got {total_steps}")
    t = np.arange(total_steps + 1, dtype=np.float64)
    mix = t / float(total_steps)
    variance = 2.0 * (mix - mix * mix)
    return BridgeSchedule(int(total_steps), _lock(mix), _lock(variance))


@dataclass(frozen=True)
class FrameSchedule:
    """Per-frame chain lengths: frame i (0-based) diffuses for steps_per_frame[i]."""

    total_steps: int
    step_size: int
    steps_per_frame: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.steps_per_frame)


def default_frame_step_size(total_steps: int, horizon: int) -> int:
    """Default spacing between consecutive frames' chain lengths: T // (2 * horizon)."""
    return total_steps // (2 * horizon)


def make_frame_schedule(
    total_steps: int, horizon: int, step_size: int | None = None
) -> FrameSchedule:
    """Assign each forecast frame its own chain length.

    Frame i (1-based) gets T - (horizon - i) * step_size steps, so the last
    frame always uses the full chain and earlier frames progressively
    shorter ones.  ``step_size=0`` gives every frame the full T (schedule
    effectively disabled).  ``step_size=None`` picks the default
    T // (2 * horizon).

    Raises:
        ValueError: if horizon < 1, step_size < 0, or the first frame's
            budget T - (horizon - 1) * step_size would drop below 1.
    """
    if not isinstance(total_steps, (int, np.integer)) or total_steps < 2:
        raise ValueError(f"total_steps must be an integer >= 2, got {total_steps!r}")
    if not isinstance(horizon, (int, np.integer)) or horizon < 1:
        raise ValueError(f"horizon must be an integer >= 1, got {horizon!r}")
    if step_size is None:
        step_size = default_frame_step_size(int(total_steps), int(horizon))
    if not isinstance(step_size, (int, np.integer)) or step_size < 0:
        raise ValueError(f"step_size must be a non-negative integer, got {step_size!r}")
    first = total_steps - (horizon - 1) * step_size
    if first < 1:
        raise ValueError(
            f"step_size {step_size} leaves frame 1 with {first} steps "
            f"(need >= 1); reduce step_size or horizon"
        )
    i = np.arange(1, horizon + 1, dtype=np.int64)
    steps = total_steps - (horizon - i) * step_size
    return FrameSchedule(int(total_steps), int(step_size), _lock(steps))


@dataclass(frozen=True)
class ReverseGrid:
    """Descending sampling grid for one frame's reverse chain.

    ``steps`` holds the full grid (head first, terminating 0); the
    truncated chain used at inference is the suffix ``steps[keep_from:]``.
    """

    steps: np.ndarray
    keep_from: int
    eta: float
    truncation_fraction: float

    @property
    def truncated_steps(self) -> np.ndarray:
        return self.steps[self.keep_from :]

    @property
    def n_transitions(self) -> int:
        return len(self.steps) - 1

    @property
    def n_truncated_transitions(self) -> int:
        return len(self.steps) - self.keep_from - 1

    @property
    def start_step(self) -> int:
        """First step of the truncated chain (where sampling actually starts)."""
        return int(self.steps[self.keep_from])


def make_reverse_grid(
    frame_steps: int,
    n_steps: int,
    eta: float = 1.0,
    truncation_fraction: float = 0.0,
    total_steps: int | None = None,
) -> ReverseGrid:
    """Build the reverse-time grid for a frame whose chain length is ``frame_steps``.

    The grid budget ``n_steps`` refers to a frame using the full chain
    ``total_steps`` (defaults to ``frame_steps``); shorter frames get a
    proportionally smaller grid, n_i = max(1, round(n_steps * T_i / T)),
    with entries round(k * T_i / n_i) for k = n_i..1 followed by 0.
    Truncation drops the first floor(truncation_fraction * n_i) entries,
    so the truncated grid is always a suffix of the full one.

    Raises:
        ValueError: on a non-positive ``frame_steps``/``n_steps``, a budget
            exceeding the full chain length, eta outside [0, 1], or a
            truncation fraction outside [0, 1).
    """
    if not isinstance(frame_steps, (int, np.integer)) or frame_steps < 1:
        raise ValueError(f"frame_steps must be an integer >= 1, got {frame_steps!r}")
    total = int(frame_steps) if total_steps is None else int(total_steps)
    if total < frame_steps:
        raise ValueError(f"total_steps {total} < frame_steps {frame_steps}")
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ValueError(f"n_steps must be an integer >= 1, got {n_steps!r}")
    if n_steps > total:
        raise ValueError(f"n_steps {n_steps} exceeds chain length {total}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta!r}")
    if not 0.0 <= truncation_fraction < 1.0:
        raise ValueError(
            f"truncation_fraction must lie in [0, 1), got {truncation_fraction!r}"
        )
    n_i = max(1, round(n_steps * frame_steps / total))
    ascending = [round(k * frame_steps / n_i) for k in range(1, n_i + 1)]
    steps = np.asarray(ascending[::-1] + [0], dtype=np.int64)
    # spacing >= 1 guarantees strict descent; guard against silent duplicates
    if np.any(np.diff(steps) >= 0):
        raise ValueError(
            f"degenerate grid for frame_steps={frame_steps}, n_steps={n_steps}"
        )
    keep_from = int(np.floor(truncation_fraction * n_i))
    return ReverseGrid(_lock(steps), keep_from, float(eta), float(truncation_fraction))


def make_frame_grids(
    frames: FrameSchedule,
    n_steps: int,
    eta: float = 1.0,
    truncation_fraction: float = 0.0,
) -> list[ReverseGrid]:
    """One :func:`make_reverse_grid` per frame, budgeted against the global chain."""
    return [
        make_reverse_grid(
            int(t_i),
            n_steps,
            eta=eta,
            truncation_fraction=truncation_fraction,
            total_steps=frames.total_steps,
        )
        for t_i in frames.steps_per_frame
    ]


@dataclass(frozen=True)
class FramewiseBridgeTables:
    """Per-frame bridge coefficient tables, shape [horizon, T + 1].

    Used by the rescaled variant of the frame schedule, where frame i's
    coefficients stretch over its own chain length instead of being read
    from the global table.  Rows are clamped flat beyond the frame's
    chain length (those steps are never visited).
    """

    total_steps: int
    mix: np.ndarray
    variance: np.ndarray


def framewise_rescaled(
    total_steps: int, frames: FrameSchedule
) -> FramewiseBridgeTables:
    """Rescaled per-frame tables: row i uses mix[t] = min(t / T_i, 1)."""
    if frames.total_steps != total_steps:
        raise ValueError("frame schedule was built for a different chain length")
    t = np.arange(total_steps + 1, dtype=np.float64)
    per_frame = frames.steps_per_frame.astype(np.float64)[:, None]
    mix = np.minimum(t[None, :] / per_frame, 1.0)
    variance = 2.0 * (mix - mix * mix)
    return FramewiseBridgeTables(int(total_steps), _lock(mix), _lock(variance))
