"""Regression metrics, windowed evaluation and per-sample error export.

MAE is reported in target units (kCal), MAPE in percent.  Per-sample
percentage errors are stored signed, as fractions (prediction - truth)
divided by truth, so the export preserves the sign for histogramming;
MAPE takes their absolute values times 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError
from .heads import EVAL, HeadModel, head_forward
from .training import Checkpoint, checkpoint_to_model, dataset_arrays

# Published reference results on the 96-image eating-scene dataset this
# model family was designed for, keyed by head variant, for annotating
# benchmark reports.  "human" is the study participants' own estimates.
REFERENCE_RESULTS = {
    "xf": {"mae_kcal": 292.35, "mape_pct": 151.33},
    "xm": {"mae_kcal": 77.76, "mape_pct": 17.63},
    "concat": {"mae_kcal": 110.84, "mape_pct": 99.36},
    "zscore": {"mae_kcal": 75.15, "mape_pct": 22.24},
    "lngn": {"mae_kcal": 57.75, "mape_pct": 16.90},
    "ln": {"mae_kcal": 56.22, "mape_pct": 11.47},
}
HUMAN_BASELINE = {"mae_kcal": 286.37, "mape_pct": 39.03}


def _check_pair(predictions, groundtruth):
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    groundtruth = np.asarray(groundtruth, dtype=np.float64).reshape(-1)
    if predictions.shape != groundtruth.shape:
        raise DomainError(
            f"prediction/groundtruth length mismatch: "
            f"{predictions.shape} vs {groundtruth.shape}"
        )
    if predictions.size == 0:
        raise DomainError("metrics are undefined on empty vectors")
    return predictions, groundtruth


def mae(predictions, groundtruth) -> float:
    """Mean absolute error, in target units."""
    p, g = _check_pair(predictions, groundtruth)
    return float(np.mean(np.abs(p - g)))


def mape(predictions, groundtruth) -> float:
    """Mean absolute percentage error, in percent; requires truth > 0."""
    p, g = _check_pair(predictions, groundtruth)
    if np.any(g <= 0):
        raise DomainError("MAPE divides by the groundtruth, which must be > 0")
    return float(np.mean(np.abs(p - g) / g) * 100.0)


@dataclass
class SampleError:
    id: str
    prediction: float
    groundtruth: float
    abs_error: float
    pct_error: float  # signed fraction (prediction - truth) / truth
    category: Optional[str] = None


@dataclass
class MetricsReport:
    mae: float
    mape: float
    n: int
    per_sample: list


@dataclass
class WindowReport:
    """Arithmetic mean of per-checkpoint MAE/MAPE over the last K epochs."""

    mae: float
    mape: float
    window: int
    n: int
    per_checkpoint: list


def predict_kcal(model: HeadModel, x_m, x_f) -> np.ndarray:
    """Eval-mode predictions in kCal (inverse target standardization applied)."""
    previous = model.mode
    model.set_mode(EVAL)
    try:
        preds, _ = head_forward(model, x_m, x_f)
    finally:
        model.set_mode(previous)
    preds = preds.astype(np.float64)
    if model.target_mean is not None:
        preds = preds * model.target_std + model.target_mean
    return preds


def evaluate(model: HeadModel, samples) -> MetricsReport:
    """Deterministic per-sample evaluation of one model."""
    if not samples:
        raise DomainError("cannot evaluate on an empty dataset")
    x_m, x_f, targets = dataset_arrays(samples, model.dtype)
    preds = predict_kcal(model, x_m, x_f)
    if np.any(targets <= 0):
        raise DomainError("MAPE divides by the groundtruth, which must be > 0")
    per_sample = [
        SampleError(
            id=s.id,
            prediction=float(p),
            groundtruth=float(t),
            abs_error=float(abs(p - t)),
            pct_error=float((p - t) / t),
            category=s.category,
        )
        for s, p, t in zip(samples, preds, targets)
    ]
    return MetricsReport(
        mae=mae(preds, targets),
        mape=mape(preds, targets),
        n=len(samples),
        per_sample=per_sample,
    )


def evaluate_window(checkpoints, samples) -> WindowReport:
    """Evaluate each checkpoint and average the metric values.

    The averaging is over metric values, not predictions; per-checkpoint
    reports are retained in the result.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise DomainError("evaluate_window needs at least one checkpoint")
    reports = []
    for item in checkpoints:
        model = checkpoint_to_model(item) if isinstance(item, Checkpoint) else item
        reports.append(evaluate(model, samples))
    return WindowReport(
        mae=float(np.mean([r.mae for r in reports])),
        mape=float(np.mean([r.mape for r in reports])),
        window=len(reports),
        n=reports[0].n,
        per_checkpoint=reports,
    )


def export_errors(report: MetricsReport, path) -> None:
    """Write the per-sample error table as CSV.

    Columns: id,prediction,groundtruth,abs_error,pct_error,category.
    pct_error is the signed fraction stored in the report; the category
    cell is blank when a sample carries no tag.
    """
    if not report.per_sample:
        raise DomainError("cannot export an empty report")
    lines = ["id,prediction,groundtruth,abs_error,pct_error,category"]
    for row in report.per_sample:
        lines.append(
            f"{row.id},{row.prediction!r},{row.groundtruth!r},"
            f"{row.abs_error!r},{row.pct_error!r},{row.category or ''}"
        )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def summary_dict(variant, report) -> dict:
    """The JSON report document: variant, metrics, sample count, window."""
    return {
        "variant": str(variant),
        "mae_kcal": report.mae,
        "mape_pct": report.mape,
        "n": report.n,
        "window": report.window if isinstance(report, WindowReport) else 1,
    }


def write_summary(path, variant, report) -> None:
    Path(path).write_text(
        json.dumps(summary_dict(variant, report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
