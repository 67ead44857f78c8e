"""Forecast quality metrics and evaluation reports.

All metrics operate on denormalized numpy arrays shaped [C, L, H, W] and
report per-frame values plus an aggregate.  PSNR is capped at
:data:`PSNR_CAP_DB`; SSIM uses a Gaussian window and population statistics
over the valid (fully inside the image) window positions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "PSNR_CAP_DB",
    "mae",
    "mse",
    "psnr",
    "ssim",
    "frame_metrics",
    "ensemble_average",
    "ensemble_best",
    "MetricsReport",
    "evaluate_forecasts",
    "aggregate_reports",
]

PSNR_CAP_DB = 100.0
COLUMNS = ["mae", "mse", "psnr", "ssim"]


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def mse(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(((pred - gt) ** 2).mean())


def psnr(pred, gt, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB, capped at PSNR_CAP_DB."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(pred, gt)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range * data_range / err), PSNR_CAP_DB)


def _gaussian_kernel(win_size: int, sigma: float) -> np.ndarray:
    r = (win_size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _local_mean(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    r = len(kern) // 2
    out = correlate1d(img, kern, axis=0, mode="constant")
    out = correlate1d(out, kern, axis=1, mode="constant")
    return out[r:-r, r:-r]  # valid region only


def ssim(
    pred,
    gt,
    data_range: float,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Structural similarity of two 2-D images (Gaussian-weighted windows)."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise ValueError("ssim expects single-channel 2-D images")
    if win_size % 2 == 0 or win_size < 3:
        raise ValueError("win_size must be an odd integer >= 3")
    if min(pred.shape) < win_size:
        raise ValueError(f"image {pred.shape} smaller than window {win_size}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    kern = _gaussian_kernel(win_size, sigma)
    mu1 = _local_mean(pred, kern)
    mu2 = _local_mean(gt, kern)
    v1 = _local_mean(pred * pred, kern) - mu1 * mu1
    v2 = _local_mean(gt * gt, kern) - mu2 * mu2
    cov = _local_mean(pred * gt, kern) - mu1 * mu2
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2)
    )
    return float(s.mean())


def frame_metrics(pred, gt, data_range: float) -> dict:
    """Per-frame metric arrays for a clip pair [C, L, H, W]."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 4:
        raise ValueError("expected clips shaped [C, L, H, W]")
    n_frames = pred.shape[1]
    out = {name: np.empty(n_frames) for name in COLUMNS}
    for f in range(n_frames):
        p, g = pred[:, f], gt[:, f]
        out["mae"][f] = mae(p, g)
        out["mse"][f] = mse(p, g)
        out["psnr"][f] = psnr(p, g, data_range)
        out["ssim"][f] = np.mean([ssim(p[c], g[c], data_range) for c in range(len(p))])
    return out


def ensemble_average(samples: np.ndarray) -> np.ndarray:
    """Elementwise mean forecast of an ensemble [K, C, L, H, W]."""
    samples = np.asarray(samples)
    if samples.ndim != 5 or samples.shape[0] < 1:
        raise ValueError("samples must be [K, C, L, H, W] with K >= 1")
    return samples.mean(axis=0)


def ensemble_best(samples: np.ndarray, gt, metric: str = "mse"):
    """Oracle member selection: the sample closest to ground truth.

    Requires ground truth, so it is an upper bound for reporting, never a
    forecast product.  Ties resolve to the lowest member index.
    Returns (sample, index).
    """
    samples = np.asarray(samples)
    if samples.ndim != 5 or samples.shape[0] < 1:
        raise ValueError("samples must be [K, C, L, H, W] with K >= 1")
    score = {"mse": mse, "mae": mae}[metric]
    errs = [score(s, gt) for s in samples]
    idx = int(np.argmin(errs))
    return samples[idx], idx


@dataclass
class MetricsReport:
    """Flat rows (identity, frame, metrics...) plus free-form metadata.

    ``frame`` is a 0-based index or "all" for the aggregate row.  The
    ``spread`` column (per-frame ensemble standard deviation) appears on
    ensemble-average rows only.  A video-distribution distance column is
    reserved in the schema but never emitted by this implementation.
    """

    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    _FIELDS = ["identity", "frame", "mae", "mse", "psnr", "ssim", "spread"]

    def identities(self) -> list:
        seen = dict.fromkeys(r["identity"] for r in self.rows)
        return list(seen)

    def row(self, identity: str, frame) -> dict:
        for r in self.rows:
            if r["identity"] == identity and r["frame"] == frame:
                return r
        raise KeyError(f"no row for ({identity!r}, {frame!r})")

    def _fieldnames(self) -> list:
        names = list(dict.fromkeys(k for r in self.rows for k in r))
        pref = [f for f in self._FIELDS if f in names]
        return pref + [n for n in names if n not in pref]

    def to_csv(self, path) -> None:
        fields = self._fieldnames()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in self.rows:
                out = {}
                for k in fields:
                    v = r.get(k)
                    if isinstance(v, float) and math.isnan(v):
                        v = ""
                    out[k] = "" if v is None else v
                writer.writerow(out)

    def to_json(self, path) -> None:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        payload = {
            "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        payload = json.loads(Path(path).read_text())
        return cls(rows=payload["rows"], meta=payload.get("meta", {}))


def _aggregate(values: np.ndarray, how: str) -> float:
    return float(values.sum() if how == "sum" else values.mean())


def evaluate_forecasts(
    deterministic,
    samples,
    gt,
    data_range: float,
    frame_reduction: str = "mean",
    best_metric: str = "mse",
) -> MetricsReport:
    """Score every forecast identity of one clip against ground truth.

    Identities: "deterministic" (when a deterministic forecast exists),
    "sample-<k>", "average" and "best" (when an ensemble exists; "best"
    additionally needs ground truth).  Without ground truth the rows are
    still emitted, with metric columns empty and the ensemble spread kept,
    and a notice lands in ``meta["notices"]``.

    ``frame_reduction`` controls how mae/mse aggregate across frames
    ("mean" or "sum"); psnr/ssim aggregates are always frame means.
    """
    if frame_reduction not in ("mean", "sum"):
        raise ValueError("frame_reduction must be 'mean' or 'sum'")
    report = MetricsReport(meta={"frame_reduction": frame_reduction, "notices": []})
    entries = []
    if deterministic is not None:
        entries.append(("deterministic", np.asarray(deterministic)))
    spread = None
    if samples is not None:
        samples = np.asarray(samples)
        entries += [(f"sample-{k}", samples[k]) for k in range(len(samples))]
        entries.append(("average", ensemble_average(samples)))
        spread = samples.std(axis=0).mean(axis=(0, 2, 3))  # per-frame
        if gt is not None:
            best, idx = ensemble_best(samples, gt, best_metric)
            entries.append(("best", best))
            report.meta["best_index"] = idx
    if not entries:
        raise ValueError("nothing to evaluate: no deterministic forecast, no samples")

    n_frames = entries[0][1].shape[1]
    for identity, pred in entries:
        per = frame_metrics(pred, gt, data_range) if gt is not None else None
        for f in range(n_frames):
            row = {"identity": identity, "frame": f}
            row.update({
                name: float(per[name][f]) if per is not None else None
                for name in COLUMNS
            })
            row["spread"] = (
                float(spread[f]) if identity == "average" and spread is not None
                else None
            )
            report.rows.append(row)
        agg = {
            "identity": identity,
            "frame": "all",
            "mae": _aggregate(per["mae"], frame_reduction) if per else None,
            "mse": _aggregate(per["mse"], frame_reduction) if per else None,
            "psnr": float(per["psnr"].mean()) if per else None,
            "ssim": float(per["ssim"].mean()) if per else None,
            "spread": (
                float(spread.mean()) if identity == "average" and spread is not None
                else None
            ),
        }
        report.rows.append(agg)
    if gt is None:
        report.meta["notices"].append(
            "ground truth unavailable: metric columns empty, best member omitted"
        )
    return report


def aggregate_reports(reports: list) -> MetricsReport:
    """Mean and std of each metric across reports (e.g. across seeds)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    keys = [(r["identity"], r["frame"]) for r in first.rows]
    for rep in reports[1:]:
        if [(r["identity"], r["frame"]) for r in rep.rows] != keys:
            raise ValueError("reports have mismatched row sets; cannot aggregate")
    out = MetricsReport(meta={"n_reports": len(reports)})
    for identity, frame in keys:
        row = {"identity": identity, "frame": frame}
        for name in COLUMNS + ["spread"]:
            vals = [rep.row(identity, frame).get(name) for rep in reports]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            row[f"{name}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{name}_std"] = float(np.std(vals)) if vals else None
        out.rows.append(row)
    return out
