"""Experiment configuration.

YAML configs parse into nested dataclasses with strict key checking: an
unknown or misspelled key fails loudly with its full path instead of being
silently ignored.  The same dataclasses serialize back to plain dicts for
checkpoint snapshots, and the builders below are the single place where a
config turns into datasets, models, and schedules.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import torch
import yaml

from bridgecast.data import (
    ClipDataset,
    generate_moving_digits,
    load_gridded_dataset,
)
from bridgecast.models import DeterministicBranch, VideoDenoiser
from bridgecast.schedules import (
    framewise_rescaled,
    make_bridge_schedule,
    make_frame_schedule,
)
from bridgecast.training import (
    ENDPOINT_MODES,
    INIT_STREAM_TAG,
    TrainSettings,
    seed_words,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "apply_overrides",
    "build_dataset",
    "build_models",
    "build_schedules",
    "build_train_settings",
    "config_schema",
]


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kind: str = "moving-digits"  # moving-digits | gridded | clips
    path: str = "data/clips"
    n_clips: int = 200
    n_digits: int = 2
    frame_height: int = 64
    frame_width: int = 64
    clip_length: int = 20
    input_length: int | None = None
    forecast_length: int | None = None
    digit_size: int = 28
    variables: list[str] = field(default_factory=lambda: ["var0"])
    seed: int = 0

    def lengths(self) -> tuple[int, int]:
        lin = self.input_length
        if lin is None:
            lin = self.clip_length // 2
        lout = self.forecast_length
        if lout is None:
            lout = self.clip_length - lin
        return lin, lout


@dataclass
class DbSection:
    enabled: bool = True
    hidden: int = 64
    translator_depth: int = 8


@dataclass
class PbSection:
    enabled: bool = True
    base_width: int = 64
    multipliers: tuple[int, int, int, int] = (1, 2, 4, 8)
    heads: int = 4
    sin_dim: int = 64
    emb_dim: int = 256
    temporal_attention: bool = True


@dataclass
class DiffusionSection:
    T: int = 1000
    reverse_steps: int = 200
    eta: float = 1.0
    truncation_fraction: float = 0.5
    endpoint: str = "last-frame"


@dataclass
class SvsSection:
    enabled: bool = True
    step_size: int | None = None  # None -> T // (2 * horizon)
    rescale: bool = False


@dataclass
class TrainingSection:
    batch_size: int = 8
    lr_db: float = 1e-3
    lr_pb: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epochs: int = 50
    max_steps: int | None = None
    ema_decay: float = 0.995
    ema_start_step: int = 30_000
    ema_interval: int = 8
    plateau_factor: float = 0.5
    plateau_patience: int = 3000
    plateau_cooldown: int = 3000
    plateau_threshold: float = 1e-4
    min_lr: float = 5e-6
    eval_interval: int = 200
    checkpoint_interval: int = 1000
    grad_clip: float | None = None
    val_batches: int = 4


@dataclass
class InferenceSection:
    n_samples: int = 20
    use_ema: bool = True
    sample_batch: int = 8
    best_metric: str = "mse"
    frame_reduction: str = "mean"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    db: DbSection = field(default_factory=DbSection)
    pb: PbSection = field(default_factory=PbSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    svs: SvsSection = field(default_factory=SvsSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    output_dir: str = "runs/default"
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _parse_section(cls, data or {}, "")
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        def plain(value):
            if dataclasses.is_dataclass(value):
                return {f.name: plain(getattr(value, f.name))
                        for f in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, list):
                return [plain(v) for v in value]
            return value

        return plain(self)

    def validate(self) -> None:
        d = self.diffusion
        if not self.db.enabled and not self.pb.enabled:
            raise ConfigError("db and pb cannot both be disabled")
        if d.endpoint not in ENDPOINT_MODES:
            raise ConfigError(
                f"diffusion.endpoint must be one of {ENDPOINT_MODES}, got {d.endpoint!r}"
            )
        if d.T < 2:
            raise ConfigError("diffusion.T must be >= 2")
        if not 1 <= d.reverse_steps <= d.T:
            raise ConfigError("diffusion.reverse_steps must lie in [1, T]")
        if not 0.0 <= d.eta <= 1.0:
            raise ConfigError("diffusion.eta must lie in [0, 1]")
        if not 0.0 <= d.truncation_fraction < 1.0:
            raise ConfigError("diffusion.truncation_fraction must lie in [0, 1)")
        if not self.db.enabled:
            if d.truncation_fraction > 0:
                raise ConfigError(
                    "truncation needs a deterministic forecast: enable db or set "
                    "diffusion.truncation_fraction to 0"
                )
            if self.svs.enabled:
                raise ConfigError(
                    "per-frame chain lengths need the deterministic branch: "
                    "enable db or disable svs"
                )
        lin, lout = self.data.lengths()
        if lin < 1 or lout < 1:
            raise ConfigError("input and forecast lengths must be >= 1")
        if self.pb.enabled and d.endpoint == "input" and lin != lout:
            raise ConfigError("endpoint 'input' requires input_length == forecast_length")
        if self.pb.enabled:
            if self.data.frame_height % 8 or self.data.frame_width % 8:
                raise ConfigError("pb needs frame sizes divisible by 8")
        if self.db.enabled:
            if self.data.frame_height % 4 or self.data.frame_width % 4:
                raise ConfigError("db needs frame sizes divisible by 4")
        if self.svs.enabled and self.pb.enabled:
            try:
                make_frame_schedule(d.T, lout, self.svs.step_size)
            except ValueError as err:
                raise ConfigError(f"svs: {err}") from err
        if self.inference.frame_reduction not in ("mean", "sum"):
            raise ConfigError("inference.frame_reduction must be 'mean' or 'sum'")
        if self.inference.best_metric not in ("mse", "mae"):
            raise ConfigError("inference.best_metric must be 'mse' or 'mae'")


def _parse_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _parse_section(hint, data[name], sub_path)
        else:
            kwargs[name] = _coerce(data[name], hint, sub_path)
    return cls(**kwargs)


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        arms = typing.get_args(hint)
        if value is None:
            if type(None) in arms:
                return None
            raise ConfigError(f"{path} may not be null")
        for arm in arms:
            if arm is type(None):
                continue
            try:
                return _coerce(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: cannot interpret {value!r}")
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a sequence")
        args = typing.get_args(hint)
        inner = args[0] if args else None
        items = [
            _coerce(v, inner, f"{path}[{i}]") if inner else v
            for i, v in enumerate(value)
        ]
        if origin is tuple and args and args[-1] is not Ellipsis and len(items) != len(args):
            raise ConfigError(f"{path} must have exactly {len(args)} entries")
        return tuple(items) if origin is tuple else list(items)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            # YAML leaves forms like "1e3" as strings; accept exact integers
            try:
                as_float = float(value)
            except ValueError:
                raise ConfigError(f"{path} must be an integer, got {value!r}")
            if as_float.is_integer():
                return int(as_float)
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path} must be a number, got {value!r}")
        raise ConfigError(f"{path} must be a number, got {value!r}")
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root in {path} must be a mapping")
    return ExperimentConfig.from_dict(data)


def apply_overrides(data: dict, assignments: list) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key_path, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key_path.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} crosses a non-mapping value")
        node[parts[-1]] = value
    return data


def build_dataset(cfg: ExperimentConfig, generate: bool = False, force: bool = False):
    """Load (or, for synthetic kinds with ``generate=True``, create) the dataset."""
    data = cfg.data
    lin, lout = data.lengths()
    if data.kind == "moving-digits":
        if generate:
            ds = generate_moving_digits(
                n_clips=data.n_clips,
                n_digits=data.n_digits,
                frame_size=(data.frame_height, data.frame_width),
                clip_length=data.clip_length,
                input_length=lin,
                digit_size=data.digit_size,
                seed=data.seed,
            )
            ds.save(data.path, force=force)
            return ds
        return ClipDataset.load(data.path)
    if data.kind == "gridded":
        return load_gridded_dataset(data.path, data.variables, lin, lout)
    if data.kind == "clips":
        return ClipDataset.load(data.path)
    raise ConfigError(f"unknown data.kind {data.kind!r}")


def build_models(cfg: ExperimentConfig, channels: int):
    """Construct the enabled branches with weight init seeded from cfg.seed.

    Seeds torch's global generator so repeated builds (and fresh processes)
    produce identical initial weights.
    """
    torch.manual_seed(seed_words(cfg.seed, INIT_STREAM_TAG))
    lin, lout = cfg.data.lengths()
    db = pb = None
    if cfg.db.enabled:
        db = DeterministicBranch(
            channels, lin, lout,
            hidden=cfg.db.hidden,
            translator_depth=cfg.db.translator_depth,
        )
    if cfg.pb.enabled:
        pb = VideoDenoiser(
            channels,
            cond_channels=cfg.db.hidden if cfg.db.enabled else 0,
            base_width=cfg.pb.base_width,
            multipliers=cfg.pb.multipliers,
            sin_dim=cfg.pb.sin_dim,
            emb_dim=cfg.pb.emb_dim,
            heads=cfg.pb.heads,
            temporal_attention=cfg.pb.temporal_attention,
        )
    return db, pb


def build_schedules(cfg: ExperimentConfig):
    """(bridge schedule, frame schedule, rescaled per-frame tables or None)."""
    _, lout = cfg.data.lengths()
    schedule = make_bridge_schedule(cfg.diffusion.T)
    if cfg.svs.enabled:
        frames = make_frame_schedule(cfg.diffusion.T, lout, cfg.svs.step_size)
    else:
        frames = make_frame_schedule(cfg.diffusion.T, lout, 0)
    tables = (
        framewise_rescaled(cfg.diffusion.T, frames)
        if (cfg.svs.enabled and cfg.svs.rescale)
        else None
    )
    return schedule, frames, tables


def build_train_settings(cfg: ExperimentConfig) -> TrainSettings:
    t = cfg.training
    return TrainSettings(
        batch_size=t.batch_size,
        lr_db=t.lr_db,
        lr_pb=t.lr_pb,
        beta1=t.beta1,
        beta2=t.beta2,
        weight_decay=t.weight_decay,
        epochs=t.epochs,
        max_steps=t.max_steps,
        endpoint=cfg.diffusion.endpoint,
        ema_decay=t.ema_decay,
        ema_start_step=t.ema_start_step,
        ema_interval=t.ema_interval,
        plateau_factor=t.plateau_factor,
        plateau_patience=t.plateau_patience,
        plateau_cooldown=t.plateau_cooldown,
        plateau_threshold=t.plateau_threshold,
        min_lr=t.min_lr,
        eval_interval=t.eval_interval,
        checkpoint_interval=t.checkpoint_interval,
        grad_clip=t.grad_clip,
        val_batches=t.val_batches,
        seed=cfg.seed,
    )


def config_schema() -> list:
    """Flat (path, type, default) rows documenting every config key."""

    def walk(cls, prefix: str, rows: list):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            path = f"{prefix}.{f.name}" if prefix else f.name
            hint = hints[f.name]
            if dataclasses.is_dataclass(hint):
                walk(hint, path, rows)
            else:
                if f.default is not dataclasses.MISSING:
                    default = f.default
                elif f.default_factory is not dataclasses.MISSING:
                    default = f.default_factory()
                else:
                    default = None
                name = getattr(hint, "__name__", None) or str(hint)
                rows.append((path, name, default))

    rows: list = []
    walk(ExperimentConfig, "", rows)
    return rows
