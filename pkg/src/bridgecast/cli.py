"""Command-line interface.

Subcommands cover the full loop: ``gen-data`` materializes a synthetic
dataset, ``train`` fits the branches, ``sample`` draws a forecast ensemble
from a checkpoint, ``eval`` scores forecast directories, and ``run``
chains all four for a preset.  Exit codes: 0 success, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from bridgecast.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    build_dataset,
    build_models,
    build_schedules,
    build_train_settings,
    config_schema,
)
from bridgecast.data import ClipDataset, NormalizationSpec
from bridgecast.inference import sample_forecast
from bridgecast.metrics import MetricsReport, aggregate_reports, evaluate_forecasts
from bridgecast.presets import get_preset, list_presets
from bridgecast.training import (
    Trainer,
    TrainingError,
    load_checkpoint,
)

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgecast",
        description="Probabilistic spatiotemporal forecasting with "
        "deterministic-guided bridge diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", help="named preset (see `bridgecast presets`)")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY.PATH=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--out", help="override output_dir")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_config_args(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("train", help="train the model")
    add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="draw a forecast ensemble from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="saved clips dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--clip", help=".npy clip [C, L(+L_out), H, W] instead of --dataset")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--truncation", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--svs", choices=["on", "off"])
    p.add_argument("--seed", type=int)
    p.add_argument("--no-ema", action="store_true", help="sample with live weights")
    p.add_argument("--out", help="forecast output directory")

    p = sub.add_parser("eval", help="score forecast directories")
    p.add_argument("--forecasts", nargs="+", required=True)
    p.add_argument("--frame-reduction", choices=["mean", "sum"], default="mean")
    p.add_argument("--best-metric", choices=["mse", "mae"], default="mse")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", help="directory for the cross-run aggregate report")

    p = sub.add_parser("run", help="gen-data + train + sample + eval in one go")
    add_config_args(p)
    p.add_argument("--force", action="store_true")

    sub.add_parser("presets", help="list available presets")
    sub.add_parser("schema", help="print every config key with type and default")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise ConfigError("pass either --config or --preset, not both")
    if args.preset:
        try:
            data = get_preset(args.preset)
        except KeyError as err:
            raise ConfigError(str(err)) from err
    elif args.config:
        with open(args.config) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    else:
        raise ConfigError("one of --config or --preset is required")
    apply_overrides(data, args.set)
    if args.out:
        data["output_dir"] = args.out
    return ExperimentConfig.from_dict(data)


def _reconcile(cfg: ExperimentConfig, dataset: ClipDataset) -> None:
    lin, lout = cfg.data.lengths()
    if dataset.input_length != lin or dataset.forecast_length != lout:
        raise ConfigError(
            f"dataset splits clips {dataset.input_length}+{dataset.forecast_length}, "
            f"config expects {lin}+{lout}"
        )
    h, w = dataset.frame_size
    cfg.data.frame_height, cfg.data.frame_width = h, w
    cfg.validate()


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if cfg.data.kind != "moving-digits":
        raise ConfigError("gen-data creates synthetic clip datasets (kind moving-digits)")
    ds = build_dataset(cfg, generate=True, force=args.force)
    print(
        f"wrote {ds.n_clips} clips {tuple(ds.clips.shape[1:])} to {cfg.data.path} "
        f"(splits {ds.splits})"
    )
    return 0


def cmd_train(args, cfg: ExperimentConfig | None = None) -> int:
    cfg = cfg or _load_cfg(args)
    try:
        dataset = build_dataset(cfg)
    except FileNotFoundError as err:
        raise ConfigError(
            f"dataset not found at {cfg.data.path!r} (run gen-data first): {err}"
        ) from err
    _reconcile(cfg, dataset)
    db, pb = build_models(cfg, dataset.channels)
    schedule, frames, tables = build_schedules(cfg)
    trainer = Trainer(
        dataset, db, pb, schedule, frames,
        build_train_settings(cfg), cfg.output_dir,
        tables=tables, config_snapshot=cfg.to_dict(),
    )
    history = trainer.fit(resume_from=getattr(args, "resume", None))
    last = history[-1] if history else {}
    print(
        f"trained to step {trainer.step_idx} "
        f"(loss_total {last.get('loss_total', float('nan')):.6f}); "
        f"checkpoint at {trainer.out_dir / 'checkpoint.pt'}"
    )
    return 0


def _load_weights(payload: dict, cfg: ExperimentConfig, channels: int, use_ema: bool):
    db, pb = build_models(cfg, channels)
    if db is not None:
        db.load_state_dict(payload["db"])
    if pb is not None:
        pb.load_state_dict(payload["pb"])
    used_ema = False
    if use_ema:
        ema = payload.get("ema")
        shadow = ema.get("shadow") if ema else None
        if shadow:
            states = {"db": db, "pb": pb}
            for name, model in states.items():
                if model is None:
                    continue
                prefix = f"{name}."
                model.load_state_dict(
                    {
                        k[len(prefix):]: v
                        for k, v in shadow.items()
                        if k.startswith(prefix)
                    },
                    strict=False,
                )
            used_ema = True
        else:
            print("note: EMA weights unavailable (never started); using live weights")
    return db, pb, used_ema


def cmd_sample(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    snap = payload["config"]
    if args.n_samples is not None:
        snap.setdefault("inference", {})["n_samples"] = args.n_samples
    if args.eta is not None:
        snap.setdefault("diffusion", {})["eta"] = args.eta
    if args.truncation is not None:
        snap.setdefault("diffusion", {})["truncation_fraction"] = args.truncation
    if args.steps is not None:
        snap.setdefault("diffusion", {})["reverse_steps"] = args.steps
    if args.svs is not None:
        snap.setdefault("svs", {})["enabled"] = args.svs == "on"
    cfg = ExperimentConfig.from_dict(snap)
    lin, lout = cfg.data.lengths()

    norm = None
    gt = None
    if args.clip:
        clip = np.load(args.clip)
        if clip.ndim != 4 or clip.shape[1] < lin:
            raise ConfigError(
                f"clip must be [C, >= {lin}, H, W], got {tuple(clip.shape)}"
            )
        x = clip[:, :lin]
        if clip.shape[1] >= lin + lout:
            gt = clip[:, lin : lin + lout]
    elif args.dataset:
        dataset = ClipDataset.load(args.dataset)
        if dataset.input_length != lin or dataset.forecast_length != lout:
            raise ConfigError("dataset clip lengths do not match the checkpoint config")
        indices = dataset.split_indices(args.split)
        if not 0 <= args.index < len(indices):
            raise ConfigError(
                f"--index {args.index} outside split {args.split!r} "
                f"of {len(indices)} clips"
            )
        xs, ys = dataset.pairs([indices[args.index]])
        x, gt = xs[0], ys[0]
        norm = dataset.normalization
    else:
        raise ConfigError("one of --dataset or --clip is required")

    use_ema = cfg.inference.use_ema and not args.no_ema
    db, pb, used_ema = _load_weights(payload, cfg, x.shape[0], use_ema)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out or Path(cfg.output_dir) / "forecast")
    out.mkdir(parents=True, exist_ok=True)
    if pb is not None:
        schedule, frames, tables = build_schedules(cfg)
        ens = sample_forecast(
            x, db, pb, schedule, frames,
            n_steps=cfg.diffusion.reverse_steps,
            eta=cfg.diffusion.eta,
            truncation_fraction=cfg.diffusion.truncation_fraction,
            n_samples=cfg.inference.n_samples,
            seed=seed,
            endpoint=cfg.diffusion.endpoint,
            tables=tables,
            sample_batch=cfg.inference.sample_batch,
        )
        np.save(out / "samples.npy", ens.samples)
        deterministic = ens.deterministic
        prov = dict(ens.provenance)
        summary = f"wrote {len(ens.samples)} samples"
    else:
        # deterministic-only checkpoint: single forecast, no ensemble
        db.eval()
        with torch.no_grad():
            y_hat, _ = db(torch.as_tensor(np.asarray(x), dtype=torch.float32)[None])
        deterministic = y_hat[0].numpy()
        prov = {"n_samples": 0, "seed": seed, "endpoint": None}
        summary = "wrote deterministic forecast (no diffusion branch)"
    np.save(out / "input.npy", np.asarray(x))
    if deterministic is not None:
        np.save(out / "deterministic.npy", deterministic)
    if gt is not None:
        np.save(out / "ground_truth.npy", np.asarray(gt))
    prov["checkpoint_step"] = payload["step"]
    prov["used_ema"] = used_ema
    prov["normalization"] = (
        {
            "shift": list(norm.shift),
            "scale": list(norm.scale),
            "value_range": list(norm.value_range),
        }
        if norm is not None
        else None
    )
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True))
    print(f"{summary} to {out} (seed {seed})")
    return 0


def _load_forecast_dir(path: Path):
    def load(name):
        f = path / name
        return np.load(f) if f.exists() else None

    samples = load("samples.npy")
    det = load("deterministic.npy")
    gt = load("ground_truth.npy")
    prov_file = path / "provenance.json"
    prov = json.loads(prov_file.read_text()) if prov_file.exists() else {}
    norm = None
    if prov.get("normalization"):
        n = prov["normalization"]
        norm = NormalizationSpec(
            tuple(n["shift"]), tuple(n["scale"]), tuple(n["value_range"])
        )
    return samples, det, gt, norm, prov


def _plot_strip(path, gt, det, samples, max_members: int = 3) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    if gt is not None:
        rows.append(("truth", gt))
    if det is not None:
        rows.append(("deterministic", det))
    if samples is not None:
        rows += [(f"sample {k}", samples[k]) for k in range(min(max_members, len(samples)))]
    n_frames = rows[0][1].shape[1]
    fig, axes = plt.subplots(
        len(rows), n_frames,
        figsize=(1.2 * n_frames, 1.3 * len(rows)),
        squeeze=False,
    )
    for r, (label, clip) in enumerate(rows):
        for f in range(n_frames):
            ax = axes[r][f]
            frame = clip[:, f]
            img = frame[0] if frame.shape[0] == 1 else np.moveaxis(frame, 0, -1)
            ax.imshow(img, cmap="gray" if frame.shape[0] == 1 else None)
            ax.set_axis_off()
            if f == 0:
                ax.set_title(label, loc="left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_eval(args) -> int:
    reports = []
    for d in args.forecasts:
        path = Path(d)
        if not path.exists():
            raise ConfigError(f"forecast directory {d!r} does not exist")
        samples, det, gt, norm, prov = _load_forecast_dir(path)
        if samples is None and det is None:
            raise ConfigError(f"{d!r} holds no forecasts (samples.npy/deterministic.npy)")
        if norm is not None:
            samples = norm.denormalize(samples) if samples is not None else None
            det = norm.denormalize(det) if det is not None else None
            gt = norm.denormalize(gt) if gt is not None else None
            lo, hi = norm.value_range
            data_range = hi - lo
        else:
            data_range = 1.0
        report = evaluate_forecasts(
            det, samples, gt, data_range,
            frame_reduction=args.frame_reduction,
            best_metric=args.best_metric,
        )
        report.meta["forecast_dir"] = str(path)
        report.to_csv(path / "report.csv")
        report.to_json(path / "report.json")
        if not args.no_plots:
            _plot_strip(path / "strip.png", gt, det, samples)
        reports.append(report)
        for notice in report.meta.get("notices", []):
            print(f"note [{d}]: {notice}")
        for identity in report.identities():
            row = report.row(identity, "all")
            cells = ", ".join(
                f"{k} {row[k]:.5g}" for k in ("mae", "mse", "psnr", "ssim")
                if isinstance(row.get(k), float) and row[k] == row[k]
            )
            print(f"{d}: {identity}: {cells or 'no ground truth'}")

    if len(reports) > 1:
        agg = aggregate_reports(reports)
        out = Path(args.out or Path(args.forecasts[0]).parent)
        out.mkdir(parents=True, exist_ok=True)
        agg.to_csv(out / "aggregate.csv")
        agg.to_json(out / "aggregate.json")
        print(f"aggregate over {len(reports)} runs written to {out / 'aggregate.csv'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    if not (Path(cfg.data.path) / "manifest.json").exists():
        build_dataset(cfg, generate=True, force=args.force)
        print(f"generated dataset at {cfg.data.path}")
    args.resume = None
    cmd_train(args, cfg=cfg)
    out_dir = Path(cfg.output_dir)
    sample_args = argparse.Namespace(
        checkpoint=str(out_dir / "checkpoint.pt"),
        dataset=cfg.data.path, split="test", index=0, clip=None,
        n_samples=None, eta=None, truncation=None, steps=None, svs=None,
        seed=None, no_ema=False, out=str(out_dir / "forecast"),
    )
    cmd_sample(sample_args)
    eval_args = argparse.Namespace(
        forecasts=[str(out_dir / "forecast")],
        frame_reduction=cfg.inference.frame_reduction,
        best_metric=cfg.inference.best_metric,
        no_plots=False, out=None,
    )
    return cmd_eval(eval_args)


def cmd_presets() -> int:
    for name in list_presets():
        print(name)
    return 0


def cmd_schema() -> int:
    for path, type_name, default in config_schema():
        print(f"{path:40s} {type_name:12s} default={default!r}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "sample":
            return cmd_sample(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "presets":
            return cmd_presets()
        if args.command == "schema":
            return cmd_schema()
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, FileExistsError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingError, ValueError, RuntimeError, KeyError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
