"""Reconstruction errors -> anomaly verdicts.

Covers threshold calibration against a normal-only calibration day, causal
median smoothing over consecutive window errors, strict-threshold
classification, and the detection metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CalibrationError, DataError, EmptyInputError

FILTER_LENGTHS = (1, 15, 30, 60, 120, 240)


@dataclass(frozen=True)
class ThresholdConfig:
    """Calibration settings; the threshold grows by step_fraction of its
    initial value per step until the calibration day is fully below it."""

    step_fraction: float = 0.01
    max_steps: int = 10_000

    def __post_init__(self):
        if self.step_fraction <= 0:
            raise ValueError("step_fraction must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class AdDecision:
    """One smoothed window verdict, for export."""

    window_index: int
    raw_error: float
    smoothed_error: float
    verdict: bool  # True = anomaly
    filter_len: int


def calibrate_threshold(train_errors: Sequence[float],
                        calibration_day_errors: Sequence[float],
                        cfg: ThresholdConfig = ThresholdConfig()) -> float:
    """Smallest grid threshold with 100% specificity on the calibration day.

    Initialized to mean(train errors) + std(calibration-day errors), then
    raised by init * step_fraction per step until every calibration error is
    at or below it.
    """
    train_errors = np.asarray(train_errors, dtype=np.float64)
    calib = np.asarray(calibration_day_errors, dtype=np.float64)
    if train_errors.size == 0 or calib.size == 0:
        raise EmptyInputError("calibration needs non-empty error sets")
    init = float(train_errors.mean() + calib.std())
    threshold = init
    top = float(calib.max())
    step = init * cfg.step_fraction
    for _ in range(cfg.max_steps):
        if top <= threshold:
            return threshold
        threshold += step
    raise CalibrationError(
        f"no 100%-specificity threshold within {cfg.max_steps} steps "
        f"(init {init:.4g}, max calibration error {top:.4g})")


def median_smooth(errors: Sequence[float], L: int) -> np.ndarray:
    """Causal median over the trailing L entries; prefixes use partial windows.

    Even-length windows take the lower of the two middle values, so the output
    is always one of the input values. Output aligns 1:1 with the input.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyInputError("cannot smooth an empty series")
    if L < 1:
        raise ValueError(f"filter length must be >= 1, got {L}")
    if L == 1:
        return errors.copy()
    out = np.empty_like(errors)
    for i in range(errors.size):
        window = np.sort(errors[max(0, i - L + 1):i + 1])
        out[i] = window[(window.size - 1) // 2]
    return out


def classify(smoothed: Sequence[float], threshold: float) -> np.ndarray:
    """Anomaly iff smoothed error strictly exceeds the threshold."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return np.asarray(smoothed, dtype=np.float64) > threshold


@dataclass
class AdMetrics:
    accuracy: float
    sensitivity: float
    specificity: float

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity}


def ad_metrics(verdicts: Sequence[bool], truth: Sequence[bool]) -> AdMetrics:
    """Accuracy, sensitivity TP/(TP+FN), specificity TN/(TN+FP).

    Metrics with a zero denominator come back as NaN rather than raising.
    """
    verdicts = np.asarray(verdicts, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if verdicts.shape != truth.shape:
        raise DataError(f"length mismatch {verdicts.shape} vs {truth.shape}")
    if verdicts.size == 0:
        raise EmptyInputError("no verdicts to score")
    tp = int(np.count_nonzero(verdicts & truth))
    tn = int(np.count_nonzero(~verdicts & ~truth))
    fp = int(np.count_nonzero(verdicts & ~truth))
    fn = int(np.count_nonzero(~verdicts & truth))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    acc = (tp + tn) / verdicts.size
    return AdMetrics(accuracy=acc, sensitivity=sens, specificity=spec)


def decisions(errors: Sequence[float], threshold: float, L: int) -> list[AdDecision]:
    """Smooth, classify, and bundle per-window decisions for export."""
    errors = np.asarray(errors, dtype=np.float64)
    smoothed = median_smooth(errors, L)
    verdicts = classify(smoothed, threshold)
    return [AdDecision(window_index=i, raw_error=float(errors[i]),
                       smoothed_error=float(smoothed[i]),
                       verdict=bool(verdicts[i]), filter_len=L)
            for i in range(errors.size)]


def write_decisions_csv(path, decs: list[AdDecision],
                        truth: Optional[Sequence[bool]] = None) -> None:
    with open(path, "w") as f:
        f.write("window_index,raw_error,smoothed_error,verdict,truth\n")
        for i, d in enumerate(decs):
            t = "" if truth is None else int(bool(truth[i]))
            f.write(f"{d.window_index},{d.raw_error!r},{d.smoothed_error!r},"
                    f"{int(d.verdict)},{t}\n")
