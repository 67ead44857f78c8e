"""Shared fixtures: tiny datasets and a briefly trained model pair.

Everything here is desk scale (16x16 frames, 2+2 frame clips) so the whole
suite stays CPU-friendly.
"""

import numpy as np
import pytest
import torch

from bridgecast.config import (
    ExperimentConfig,
    build_models,
    build_schedules,
    build_train_settings,
)
from bridgecast.data import generate_moving_digits
from bridgecast.presets import get_preset
from bridgecast.training import Trainer


ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Collect a one-line verdict from an acceptance test.

    Lines are echoed immediately (visible with -s) and again in a summary
    section at the end of the run so they survive output capture.
    """
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def smoke_config(data_path, out_dir, preset="db-pb-bridge-replicate", **overrides):
    """Preset config with paths redirected into a test tmp dir."""
    data = get_preset(preset)
    data["data"]["path"] = str(data_path)
    data["output_dir"] = str(out_dir)
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return ExperimentConfig.from_dict(data)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_moving_digits(
        n_clips=12, n_digits=2, frame_size=(16, 16), clip_length=4,
        input_length=2, digit_size=6, split_fractions=(0.75, 0.125, 0.125),
        seed=7,
    )


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory, tiny_dataset):
    """Model pair trained for 60 steps on the tiny dataset.

    Returns (cfg, db, pb, schedule, frames, out_dir).  Enough training for
    sampling tests that need structure without costing more than seconds.
    """
    out = tmp_path_factory.mktemp("trained-tiny")
    cfg = smoke_config(out / "data", out / "run")
    db, pb = build_models(cfg, tiny_dataset.channels)
    schedule, frames, tables = build_schedules(cfg)
    trainer = Trainer(
        tiny_dataset, db, pb, schedule, frames,
        build_train_settings(cfg), out / "run", tables=tables,
        config_snapshot=cfg.to_dict(),
    )
    trainer.fit()
    db.eval()
    pb.eval()
    return cfg, db, pb, schedule, frames, out / "run"


@pytest.fixture
def torch_seed():
    torch.manual_seed(1234)
    return 1234


def rand_clip(shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).random(shape, dtype=np.float64).astype(dtype)
