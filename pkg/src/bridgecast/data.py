"""Datasets: synthetic bouncing-digit clips and gridded time-series windows.

Both paths end in a :class:`ClipDataset` -- a normalized array of clips
[N, C, L_in + L_out, H, W] with disjoint split index ranges and the
normalization needed to report metrics in native units.  Datasets persist
as a directory holding ``manifest.json`` plus one ``.npy`` per array, and
the writer is deterministic: regenerating with the same seed yields
byte-identical files.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import torch

from bridgecast.glyphs import glyph_bank

__all__ = [
    "NormalizationSpec",
    "ClipDataset",
    "bounce_trajectory",
    "generate_moving_digits",
    "load_gridded_dataset",
    "write_gridded_layout",
    "synthetic_gridded_fields",
    "replicate_last_frame",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-channel affine normalization: stored = (raw - shift) / scale."""

    shift: tuple[float, ...]
    scale: tuple[float, ...]
    value_range: tuple[float, float]  # raw units

    def __post_init__(self):
        if len(self.shift) != len(self.scale):
            raise ValueError("shift and scale must have one entry per channel")
        if any(s == 0 for s in self.scale):
            raise ValueError("scale entries must be nonzero")
        if not self.value_range[1] > self.value_range[0]:
            raise ValueError("value_range must be increasing")

    def _cols(self, arr):
        shape = [1] * arr.ndim
        shape[-4] = len(self.shift)  # channel axis of [..., C, L, H, W]
        lib = torch if torch.is_tensor(arr) else np
        kw = {"device": arr.device} if torch.is_tensor(arr) else {}
        shift = lib.tensor(self.shift, dtype=arr.dtype, **kw) if lib is torch \
            else np.asarray(self.shift, dtype=arr.dtype)
        scale = lib.tensor(self.scale, dtype=arr.dtype, **kw) if lib is torch \
            else np.asarray(self.scale, dtype=arr.dtype)
        return shift.reshape(shape), scale.reshape(shape)

    def normalize(self, arr):
        shift, scale = self._cols(arr)
        return (arr - shift) / scale

    def denormalize(self, arr):
        shift, scale = self._cols(arr)
        return arr * scale + shift


IDENTITY_RANGE = (0.0, 1.0)


@dataclass
class ClipDataset:
    """Normalized clips with disjoint split ranges.

    ``clips`` is [N, C, input_length + forecast_length, H, W] float32 in
    normalized units; ``splits`` maps split name to a half-open index range.
    """

    clips: np.ndarray
    input_length: int
    forecast_length: int
    normalization: NormalizationSpec
    splits: dict[str, tuple[int, int]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clips.ndim != 5:
            raise ValueError("clips must be [N, C, L, H, W]")
        if self.clips.shape[2] != self.input_length + self.forecast_length:
            raise ValueError(
                f"clip length {self.clips.shape[2]} != "
                f"{self.input_length} + {self.forecast_length}"
            )
        spans = sorted(self.splits.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"split ranges overlap: {spans}")
        for lo, hi in spans:
            if not (0 <= lo <= hi <= len(self.clips)):
                raise ValueError(f"split range ({lo}, {hi}) out of bounds")

    @property
    def n_clips(self) -> int:
        return len(self.clips)

    @property
    def channels(self) -> int:
        return self.clips.shape[1]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.clips.shape[-2], self.clips.shape[-1]

    def split_indices(self, split: str) -> np.ndarray:
        lo, hi = self.splits[split]
        return np.arange(lo, hi)

    def pairs(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Past/future halves of the selected clips."""
        sel = self.clips[np.asarray(indices)]
        return sel[:, :, : self.input_length], sel[:, :, self.input_length :]

    def save(self, path, force: bool = False) -> None:
        path = Path(path)
        manifest_path = path / "manifest.json"
        if manifest_path.exists() and not force:
            raise FileExistsError(f"{manifest_path} exists (use force to overwrite)")
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "clips.npy", self.clips)
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": "clips",
            "shape": list(self.clips.shape),
            "input_length": self.input_length,
            "forecast_length": self.forecast_length,
            "normalization": {
                "shift": list(self.normalization.shift),
                "scale": list(self.normalization.scale),
                "value_range": list(self.normalization.value_range),
            },
            "splits": {k: list(v) for k, v in self.splits.items()},
            "arrays": {"clips": "clips.npy"},
            "meta": self.meta,
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClipDataset":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("kind") != "clips":
            raise ValueError(
                f"expected a clips dataset at {path}, found kind "
                f"{manifest.get('kind')!r}"
            )
        norm = manifest["normalization"]
        return cls(
            clips=np.load(path / manifest["arrays"]["clips"]),
            input_length=manifest["input_length"],
            forecast_length=manifest["forecast_length"],
            normalization=NormalizationSpec(
                tuple(norm["shift"]), tuple(norm["scale"]),
                tuple(norm["value_range"]),
            ),
            splits={k: tuple(v) for k, v in manifest["splits"].items()},
            meta=manifest.get("meta", {}),
        )


def replicate_last_frame(x, n_frames: int):
    """Repeat the final frame of a clip n_frames times along the frame axis."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    last = x[..., -1:, :, :]
    reps = [1] * x.ndim
    reps[-3] = n_frames
    if torch.is_tensor(x):
        return last.repeat(*reps)
    return np.tile(last, reps)


def bounce_trajectory(
    p0: np.ndarray, v: np.ndarray, n_frames: int, limits: np.ndarray
) -> np.ndarray:
    """Positions of a point bouncing elastically inside [0, limit] per axis.

    Overshoot reflects: a step crossing a wall is mirrored about it, possibly
    several times for large velocities, which keeps the motion identical to
    the triangle-wave fold of the unreflected straight line.
    """
    scalar = np.ndim(p0) == 0
    p = np.atleast_1d(np.asarray(p0, dtype=np.float64)).copy()
    v = np.atleast_1d(np.asarray(v, dtype=np.float64)).copy()
    limits = np.broadcast_to(
        np.asarray(limits, dtype=np.float64), p.shape
    ).copy()
    if np.any(limits <= 0):
        raise ValueError("limits must be positive")
    if np.any(p < 0) or np.any(p > limits):
        raise ValueError("start position outside the box")
    out = np.empty((n_frames, len(p)))
    for f in range(n_frames):
        out[f] = p
        p = p + v
        for ax in range(len(p)):
            while p[ax] < 0 or p[ax] > limits[ax]:
                if p[ax] < 0:
                    p[ax] = -p[ax]
                else:
                    p[ax] = 2 * limits[ax] - p[ax]
                v[ax] = -v[ax]
    return out[:, 0] if scalar else out


def generate_moving_digits(
    n_clips: int,
    n_digits: int = 2,
    frame_size: tuple[int, int] = (64, 64),
    clip_length: int = 20,
    input_length: int | None = None,
    digit_size: int = 28,
    digit_source: np.ndarray | None = None,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> ClipDataset:
    """Bouncing-digit clips: digits move linearly and reflect off the walls.

    Overlapping digits composite by elementwise max, so values stay in
    [0, 1].  Each clip draws from its own spawned RNG stream; the result is
    a pure function of the arguments.
    """
    if n_clips < 1 or n_digits < 1 or clip_length < 2:
        raise ValueError("need n_clips >= 1, n_digits >= 1, clip_length >= 2")
    h, w = frame_size
    if digit_size > min(h, w):
        raise ValueError(f"digit_size {digit_size} exceeds frame {frame_size}")
    if input_length is None:
        input_length = clip_length // 2
    if not 0 < input_length < clip_length:
        raise ValueError("input_length must split the clip into two nonempty parts")

    bank = glyph_bank(digit_size, digit_source)
    limits = np.array([h - digit_size, w - digit_size], dtype=np.float64)
    clips = np.zeros((n_clips, 1, clip_length, h, w), dtype=np.float32)
    streams = np.random.SeedSequence(seed).spawn(n_clips)
    for ci, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        for _ in range(n_digits):
            glyph = bank[rng.integers(0, len(bank))]
            p0 = rng.uniform(0.0, limits)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            speed = rng.uniform(2.0, 5.0)
            vel = speed * np.array([np.sin(angle), np.cos(angle)])
            pos = bounce_trajectory(p0, vel, clip_length, limits)
            for f in range(clip_length):
                r, c = int(round(pos[f, 0])), int(round(pos[f, 1]))
                region = clips[ci, 0, f, r : r + digit_size, c : c + digit_size]
                np.maximum(region, glyph, out=region)

    fr_train, fr_val, _ = split_fractions
    n_train = int(np.floor(fr_train * n_clips))
    n_val = int(np.floor(fr_val * n_clips))
    splits = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, n_clips),
    }
    return ClipDataset(
        clips=clips,
        input_length=input_length,
        forecast_length=clip_length - input_length,
        normalization=NormalizationSpec((0.0,), (1.0,), IDENTITY_RANGE),
        splits=splits,
        meta={
            "source": "moving-digits",
            "seed": seed,
            "n_digits": n_digits,
            "digit_size": digit_size,
        },
    )


def write_gridded_layout(path, arrays: dict, timestamps, splits: dict, force=False):
    """Persist raw gridded fields: one [T, H, W] array per variable plus a manifest.

    ``splits`` maps split name to an inclusive year range [y0, y1];
    ``timestamps`` are ISO-8601 strings, one per time step.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists (use force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != len(timestamps):
            raise ValueError(f"variable {name!r} must be [T, H, W] matching timestamps")
        np.save(path / f"{name}.npy", arr)
        files[name] = f"{name}.npy"
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "gridded",
        "arrays": files,
        "timestamps": list(timestamps),
        "splits": {k: list(v) for k, v in splits.items()},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def synthetic_gridded_fields(
    n_steps: int, grid: tuple[int, int], n_vars: int = 1, seed: int = 0
) -> tuple[dict, list]:
    """Smooth synthetic fields with hourly timestamps, for demos and tests."""
    rng = np.random.default_rng(seed)
    h, w = grid
    yy, xx = np.meshgrid(np.linspace(0, 2 * np.pi, h), np.linspace(0, 2 * np.pi, w),
                         indexing="ij")
    t = np.arange(n_steps)[:, None, None]
    arrays = {}
    for v in range(n_vars):
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.uniform(0.5, 2.0, size=3)
        field = (
            amp[0] * np.sin(xx + 0.05 * t + phase[0])
            + amp[1] * np.cos(yy - 0.03 * t + phase[1])
            + amp[2] * np.sin(0.01 * t + phase[2])
            + 0.05 * rng.standard_normal((n_steps, h, w))
        )
        arrays[f"var{v}"] = field.astype(np.float32)
    start = datetime(2000, 1, 1)
    stamps = [(start + timedelta(hours=i)).isoformat() for i in range(n_steps)]
    return arrays, stamps


def _parse_stamps(stamps: list) -> np.ndarray:
    return np.array([np.datetime64(s) for s in stamps])


def load_gridded_dataset(
    path,
    variables,
    input_length: int,
    forecast_length: int,
    stride: int = 1,
) -> ClipDataset:
    """Window a gridded layout into clips, standardizing on the train split.

    Windows must be temporally contiguous (constant sampling interval inside
    the window) and fall entirely inside one split's year range; anything
    else is dropped and counted in ``meta["dropped_windows"]``.
    Standardization statistics come from train-years time steps only; a
    zero-variance channel gets scale 1 and a warning.
    """
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("kind") != "gridded":
        raise ValueError(f"expected a gridded layout at {path}")
    if isinstance(variables, str):
        variables = [variables]
    for v in variables:
        if v not in manifest["arrays"]:
            raise KeyError(f"variable {v!r} not in layout (has {list(manifest['arrays'])})")
    fields = np.stack(
        [np.load(path / manifest["arrays"][v]) for v in variables], axis=1
    )  # [T, C, H, W]
    stamps = _parse_stamps(manifest["timestamps"])
    if len(stamps) != len(fields):
        raise ValueError("timestamp count does not match field length")
    years = stamps.astype("datetime64[Y]").astype(int) + 1970
    diffs = np.diff(stamps)
    step = np.min(diffs) if len(diffs) else np.timedelta64(1, "h")

    split_years = {k: tuple(v) for k, v in manifest["splits"].items()}
    train_mask = (years >= split_years["train"][0]) & (years <= split_years["train"][1])
    if not train_mask.any():
        raise ValueError("no time steps fall in the train year range")
    shift, scale = [], []
    for c in range(fields.shape[1]):
        mu = float(fields[train_mask, c].mean())
        sd = float(fields[train_mask, c].std())
        if sd == 0.0:
            warnings.warn(
                f"variable {variables[c]!r} constant on train split; scale set to 1"
            )
            sd = 1.0
        shift.append(mu)
        scale.append(sd)
    raw_train = fields[train_mask]
    norm = NormalizationSpec(
        tuple(shift), tuple(scale),
        (float(raw_train.min()), float(raw_train.max())),
    )

    total = input_length + forecast_length
    order = ["train", "val", "test"]
    windows, ranges, dropped = [], {}, 0
    for split in order:
        if split not in split_years:
            continue
        y0, y1 = split_years[split]
        lo = len(windows)
        for start in range(0, len(fields) - total + 1, stride):
            span = slice(start, start + total)
            yr = years[span]
            if yr.min() < y0 or yr.max() > y1:
                if y0 <= yr.min() <= y1:  # starts inside, leaks out
                    dropped += 1
                continue
            if np.any(np.diff(stamps[span]) != step):
                dropped += 1
                continue
            windows.append(fields[span])
        ranges[split] = (lo, len(windows))
    if not windows:
        raise ValueError("no valid windows; check lengths and split years")
    clips = np.stack(windows).transpose(0, 2, 1, 3, 4)  # [N, C, L, H, W]
    clips = norm.normalize(clips).astype(np.float32)
    return ClipDataset(
        clips=clips,
        input_length=input_length,
        forecast_length=forecast_length,
        normalization=norm,
        splits=ranges,
        meta={
            "source": "gridded",
            "variables": list(variables),
            "dropped_windows": dropped,
        },
    )
