"""Named experiment presets.

The ablation presets toggle the architecture components one axis at a
time, from the deterministic branch alone up to the full model:

==========================  ===  ===  ========  ==========  ===
preset                      db   pb   bridge    endpoint    svs
==========================  ===  ===  ========  ==========  ===
db-only                     on   off  --        --          off
pb-only                     off  on   off       noise       off
db-pb                       on   on   off       noise       off
pb-bridge                   off  on   on        input       off
db-pb-bridge                on   on   on        input       off
db-pb-bridge-replicate      on   on   on        last-frame  off
full                        on   on   on        last-frame  on
==========================  ===  ===  ========  ==========  ===

"bridge off" keeps the same interpolant machinery but draws the chain
endpoint as fresh noise; presets without the deterministic branch also run
without truncation, which needs the deterministic forecast as a seed.
The ablation presets are desk-scale (tiny frames, a few dozen steps) so
the whole matrix runs on a CPU in minutes; ``reference`` is the full-size
configuration (learning rates 1e-3 / 1e-4; an alternative published pair
is 3e-4 / 1e-4).
"""

from __future__ import annotations

import copy

__all__ = ["list_presets", "get_preset"]


_SMOKE_BASE = {
    "data": {
        "kind": "moving-digits",
        "path": "data/tiny-digits",
        "n_clips": 16,
        "n_digits": 2,
        "frame_height": 16,
        "frame_width": 16,
        "clip_length": 4,
        "input_length": 2,
        "digit_size": 6,
        "seed": 7,
    },
    "db": {"enabled": True, "hidden": 8, "translator_depth": 2},
    "pb": {
        "enabled": True,
        "base_width": 8,
        "multipliers": [1, 2, 2, 4],
        "heads": 2,
    },
    "diffusion": {
        "T": 100,
        "reverse_steps": 20,
        "eta": 1.0,
        "truncation_fraction": 0.5,
        "endpoint": "last-frame",
    },
    "svs": {"enabled": False},
    "training": {
        "batch_size": 4,
        "max_steps": 60,
        "epochs": 1,
        "ema_decay": 0.9,
        "ema_start_step": 20,
        "ema_interval": 4,
        "eval_interval": 20,
        "checkpoint_interval": 60,
        "val_batches": 1,
    },
    "inference": {"n_samples": 4, "sample_batch": 4},
    "seed": 0,
}


def _smoke(**overrides) -> dict:
    cfg = copy.deepcopy(_SMOKE_BASE)
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    return cfg


_PRESETS = {
    "db-only": _smoke(
        pb={"enabled": False},
        diffusion={"truncation_fraction": 0.0},
    ),
    "pb-only": _smoke(
        db={"enabled": False},
        diffusion={"endpoint": "noise", "truncation_fraction": 0.0},
    ),
    "db-pb": _smoke(
        diffusion={"endpoint": "noise", "truncation_fraction": 0.0},
    ),
    "pb-bridge": _smoke(
        db={"enabled": False},
        diffusion={"endpoint": "input", "truncation_fraction": 0.0},
    ),
    "db-pb-bridge": _smoke(
        diffusion={"endpoint": "input"},
    ),
    "db-pb-bridge-replicate": _smoke(),
    "full": _smoke(
        svs={"enabled": True, "step_size": 25},
    ),
    "reference": {
        "data": {
            "kind": "moving-digits",
            "path": "data/moving-digits",
            "n_clips": 10000,
            "n_digits": 2,
            "frame_height": 64,
            "frame_width": 64,
            "clip_length": 20,
            "input_length": 10,
            "digit_size": 28,
            "seed": 0,
        },
        "db": {"enabled": True, "hidden": 64, "translator_depth": 8},
        "pb": {
            "enabled": True,
            "base_width": 64,
            "multipliers": [1, 2, 4, 8],
            "heads": 4,
        },
        "diffusion": {
            "T": 1000,
            "reverse_steps": 200,
            "eta": 1.0,
            "truncation_fraction": 0.5,
            "endpoint": "last-frame",
        },
        "svs": {"enabled": True},
        "training": {
            "batch_size": 8,
            "lr_db": 1.0e-3,
            "lr_pb": 1.0e-4,
            "epochs": 50,
            "ema_decay": 0.995,
            "ema_start_step": 30000,
            "ema_interval": 8,
        },
        "inference": {"n_samples": 20},
        "seed": 0,
    },
}

ABLATION_PRESETS = [
    "db-only",
    "pb-only",
    "db-pb",
    "pb-bridge",
    "db-pb-bridge",
    "db-pb-bridge-replicate",
    "full",
]


def list_presets() -> list:
    return list(_PRESETS)


def get_preset(name: str) -> dict:
    """A deep copy of the named preset's config dict."""
    if name not in _PRESETS:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(_PRESETS)}"
        )
    return copy.deepcopy(_PRESETS[name])
