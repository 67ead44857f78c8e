"""Joint training of the deterministic and diffusion branches.

Both branches share one total loss (plain sum of the two mean-squared
terms) and one Adam optimizer with per-branch learning-rate groups.
Gradients from the diffusion loss flow into the deterministic branch
through the conditioning features, which is what makes the training
end to end.

Reproducibility contract: batch order is a pure function of (seed, epoch)
and every stochastic draw inside a step comes from a generator reseeded
from (seed, step), so resuming from a checkpoint continues the exact
trajectory of an uninterrupted run with no RNG state serialization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from bridgecast.bridge import forward_sample, training_target
from bridgecast.data import ClipDataset, replicate_last_frame
from bridgecast.schedules import BridgeSchedule, FrameSchedule

__all__ = [
    "TrainingError",
    "StepLosses",
    "TrainSettings",
    "EMA",
    "ema_update",
    "draw_frame_steps",
    "make_endpoint",
    "training_losses",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1

ENDPOINT_MODES = ("last-frame", "input", "noise")


class TrainingError(RuntimeError):
    pass


@dataclass
class StepLosses:
    total: Tensor
    db: Tensor | None = None
    pb: Tensor | None = None

    def item_dict(self) -> dict:
        return {
            "loss_total": float(self.total.detach()),
            "loss_db": float(self.db.detach()) if self.db is not None else None,
            "loss_pb": float(self.pb.detach()) if self.pb is not None else None,
        }


@dataclass
class TrainSettings:
    batch_size: int = 8
    lr_db: float = 1e-3
    lr_pb: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epochs: int = 1
    max_steps: int | None = None
    endpoint: str = "last-frame"
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
    seed: int = 0


INIT_STREAM_TAG = 4  # weight-init stream, disjoint from batch/step/val/member streams


def seed_words(*key: int) -> int:
    """Collapse a stream key into a 64-bit torch seed via SeedSequence."""
    words = np.random.SeedSequence(list(key)).generate_state(2)
    return int(words[0]) << 32 | int(words[1])


def _seeded_generator(*key: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed_words(*key))
    return g


def ema_update(ema: dict, new: dict, decay: float) -> None:
    """In-place exponential moving average: ema = decay * ema + (1 - decay) * new."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    for name, tensor in new.items():
        ema[name].mul_(decay).add_(tensor.detach(), alpha=1.0 - decay)


class EMA:
    """Shadow copy of the model weights, updated every ``interval`` steps
    once training passes ``start_step``.  The shadow is created lazily at
    the first update; until then there is nothing to load at inference.
    """

    def __init__(self, decay: float = 0.995, start_step: int = 0, interval: int = 1):
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self.decay = decay
        self.start_step = start_step
        self.interval = interval
        self.shadow: dict | None = None
        self.n_updates = 0

    def maybe_update(self, named_params: dict, step: int) -> bool:
        if step < self.start_step or (step - self.start_step) % self.interval:
            return False
        if self.shadow is None:
            self.shadow = {k: v.detach().clone() for k, v in named_params.items()}
        else:
            ema_update(self.shadow, named_params, self.decay)
        self.n_updates += 1
        return True

    def state_dict(self) -> dict:
        return {
            "decay": self.decay,
            "start_step": self.start_step,
            "interval": self.interval,
            "shadow": self.shadow,
            "n_updates": self.n_updates,
        }

    def load_state_dict(self, state: dict) -> None:
        self.decay = state["decay"]
        self.start_step = state["start_step"]
        self.interval = state["interval"]
        self.shadow = state["shadow"]
        self.n_updates = state["n_updates"]


def draw_frame_steps(
    rng: torch.Generator, batch_size: int, frames: FrameSchedule
) -> Tensor:
    """Per-sample per-frame steps: one shared uniform u per sample,
    t_i = max(1, ceil(u * T_i)), so all frames of a sample sit at the same
    relative progress along their own chains."""
    u = torch.rand(batch_size, 1, generator=rng, dtype=torch.float64)
    budgets = torch.tensor(np.asarray(frames.steps_per_frame), dtype=torch.float64)
    return torch.ceil(u * budgets).clamp_min(1).long()


def make_endpoint(x: Tensor, y: Tensor, mode: str, rng: torch.Generator) -> Tensor:
    """Chain endpoint for the bridge: replicated last input frame, the raw
    input clip, or fresh Gaussian noise."""
    if mode == "last-frame":
        return replicate_last_frame(x, y.shape[-3])
    if mode == "input":
        if x.shape != y.shape:
            raise ValueError(
                "endpoint 'input' needs matching input/forecast lengths, got "
                f"{tuple(x.shape)} vs {tuple(y.shape)}"
            )
        return x
    if mode == "noise":
        return torch.randn(y.shape, generator=rng, dtype=y.dtype, device=y.device)
    raise ValueError(f"unknown endpoint mode {mode!r} (choose from {ENDPOINT_MODES})")


def training_losses(
    x: Tensor,
    y: Tensor,
    db,
    pb,
    schedule: BridgeSchedule,
    frames: FrameSchedule,
    rng: torch.Generator,
    endpoint: str = "last-frame",
    tables=None,
) -> StepLosses:
    """Compute the joint loss for one batch (no backward, no optimizer).

    Stochastic draw order is fixed (steps, bridge noise, endpoint noise) so
    a reseeded generator reproduces the loss exactly.
    """
    if db is None and pb is None:
        raise ValueError("at least one branch is required")
    l_db = l_pb = None
    z = None
    if db is not None:
        y_hat, z = db(x)
        l_db = torch.nn.functional.mse_loss(y_hat, y)
    if pb is not None:
        t = draw_frame_steps(rng, x.shape[0], frames)
        noise = torch.randn(y.shape, generator=rng, dtype=y.dtype, device=y.device)
        x_end = make_endpoint(x, y, endpoint, rng)
        coeffs = tables if tables is not None else schedule
        x_t = forward_sample(y, x_end, t, coeffs, noise)
        target = training_target(y, x_end, t, coeffs, noise)
        eps = pb(x_t, t, z)
        l_pb = torch.nn.functional.mse_loss(eps, target)
    total = sum(l for l in (l_db, l_pb) if l is not None)
    return StepLosses(total=total, db=l_db, pb=l_pb)


def _named_params(db, pb) -> dict:
    params = {}
    if db is not None:
        params.update({f"db.{k}": v for k, v in db.named_parameters()})
    if pb is not None:
        params.update({f"pb.{k}": v for k, v in pb.named_parameters()})
    return params


def save_checkpoint(path, *, step, db, pb, ema, optimizer, scheduler, config) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "config": config,
        "db": db.state_dict() if db is not None else None,
        "pb": pb.state_dict() if pb is not None else None,
        "ema": ema.state_dict() if ema is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    return payload


LOG_FIELDS = [
    "step", "loss_total", "loss_db", "loss_pb", "lr_db", "lr_pb", "val_loss",
]


class Trainer:
    """Steps the joint model over a ClipDataset and manages logs/checkpoints.

    One Adam optimizer with a parameter group per branch; validation loss
    drives a reduce-on-plateau schedule for both groups.
    """

    def __init__(
        self,
        dataset: ClipDataset,
        db,
        pb,
        schedule: BridgeSchedule,
        frames: FrameSchedule,
        settings: TrainSettings,
        out_dir,
        tables=None,
        config_snapshot: dict | None = None,
    ):
        if db is None and pb is None:
            raise ValueError("at least one branch is required")
        if settings.endpoint not in ENDPOINT_MODES:
            raise ValueError(f"unknown endpoint mode {settings.endpoint!r}")
        self.dataset = dataset
        self.db = db
        self.pb = pb
        self.schedule = schedule
        self.frames = frames
        self.tables = tables
        self.s = settings
        self.out_dir = Path(out_dir)
        self.config_snapshot = config_snapshot or {}

        groups = []
        if db is not None:
            groups.append({"params": list(db.parameters()), "lr": settings.lr_db})
        if pb is not None:
            groups.append({"params": list(pb.parameters()), "lr": settings.lr_pb})
        self.optimizer = torch.optim.Adam(
            groups,
            betas=(settings.beta1, settings.beta2),
            weight_decay=settings.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer,
            factor=settings.plateau_factor,
            patience=settings.plateau_patience,
            cooldown=settings.plateau_cooldown,
            threshold=settings.plateau_threshold,
            min_lr=settings.min_lr,
        )
        self.ema = EMA(settings.ema_decay, settings.ema_start_step, settings.ema_interval)
        self.step_idx = 0

        n_train = len(self.dataset.split_indices("train"))
        if n_train < 1:
            raise ValueError("train split is empty")
        self.batches_per_epoch = int(np.ceil(n_train / settings.batch_size))

    @property
    def total_steps(self) -> int:
        if self.s.max_steps is not None:
            return self.s.max_steps
        return self.s.epochs * self.batches_per_epoch

    def _batch_indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.batches_per_epoch)
        order = np.random.default_rng(
            np.random.SeedSequence([self.s.seed, 0, epoch])
        ).permutation(self.dataset.split_indices("train"))
        lo = offset * self.s.batch_size
        return order[lo : lo + self.s.batch_size]

    def _tensor_pairs(self, indices) -> tuple[Tensor, Tensor]:
        x, y = self.dataset.pairs(indices)
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(
            np.ascontiguousarray(y)
        )

    def _lrs(self) -> dict:
        lrs = {"lr_db": None, "lr_pb": None}
        names = []
        if self.db is not None:
            names.append("lr_db")
        if self.pb is not None:
            names.append("lr_pb")
        for name, group in zip(names, self.optimizer.param_groups):
            lrs[name] = group["lr"]
        return lrs

    def train_step(self, step: int) -> dict:
        x, y = self._tensor_pairs(self._batch_indices(step))
        rng = _seeded_generator(self.s.seed, 1, step)
        losses = training_losses(
            x, y, self.db, self.pb, self.schedule, self.frames, rng,
            endpoint=self.s.endpoint, tables=self.tables,
        )
        terms = losses.item_dict()
        bad = [k for k, v in terms.items() if v is not None and not np.isfinite(v)]
        if bad:
            raise TrainingError(
                f"non-finite loss at step {step}: "
                + ", ".join(f"{k}={terms[k]}" for k in bad)
            )
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if self.s.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]],
                self.s.grad_clip,
            )
        self.optimizer.step()
        self.ema.maybe_update(_named_params(self.db, self.pb), step)
        return terms

    def validation_loss(self, step: int) -> float:
        idx = self.dataset.split_indices("val")
        if len(idx) == 0:
            idx = self.dataset.split_indices("train")
        rng = _seeded_generator(self.s.seed, 2, step)
        losses = []
        with torch.no_grad():
            for lo in range(0, min(len(idx), self.s.val_batches * self.s.batch_size),
                            self.s.batch_size):
                x, y = self._tensor_pairs(idx[lo : lo + self.s.batch_size])
                out = training_losses(
                    x, y, self.db, self.pb, self.schedule, self.frames, rng,
                    endpoint=self.s.endpoint, tables=self.tables,
                )
                losses.append(float(out.total))
        return float(np.mean(losses))

    def _checkpoint(self, step: int, name="checkpoint.pt") -> None:
        save_checkpoint(
            self.out_dir / name,
            step=step,
            db=self.db,
            pb=self.pb,
            ema=self.ema,
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            config=self.config_snapshot,
        )

    def restore(self, checkpoint_path) -> None:
        payload = load_checkpoint(checkpoint_path)
        if self.db is not None:
            self.db.load_state_dict(payload["db"])
        if self.pb is not None:
            self.pb.load_state_dict(payload["pb"])
        if payload["ema"] is not None:
            self.ema.load_state_dict(payload["ema"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.scheduler.load_state_dict(payload["scheduler"])
        self.step_idx = payload["step"]

    def fit(self, resume_from=None) -> list:
        """Run (or continue) training; returns the list of log rows."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume_from is not None:
            self.restore(resume_from)
        log_path = self.out_dir / "train_log.csv"
        fresh = self.step_idx == 0 or not log_path.exists()
        history = []
        with open(log_path, "w" if fresh else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if fresh:
                writer.writeheader()
            for step in range(self.step_idx, self.total_steps):
                row = {"step": step}
                row.update(self.train_step(step))
                if (step + 1) % self.s.eval_interval == 0:
                    val = self.validation_loss(step)
                    self.scheduler.step(val)
                    row["val_loss"] = val
                else:
                    row["val_loss"] = None
                row.update(self._lrs())
                history.append(row)
                writer.writerow(
                    {k: ("" if row.get(k) is None else row.get(k)) for k in LOG_FIELDS}
                )
                self.step_idx = step + 1
                if (step + 1) % self.s.checkpoint_interval == 0:
                    self._checkpoint(self.step_idx)
            self._checkpoint(self.step_idx)
        return history
