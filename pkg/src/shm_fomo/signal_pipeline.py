"""Raw acceleration recordings -> normalized, energy-filtered spectrogram windows.

The pipeline is: slice the z-axis signal into fixed windows, drop windows whose
mean-square (de-meaned) energy falls below a threshold, standardize each kept
window, convert it to a 100x100 log-magnitude spectrogram image, and attach the
scalar traffic target computed from per-sample vehicle labels when available.
All functions are pure and deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError, DataError, EmptyInputError

logger = logging.getLogger(__name__)

SPEC_SIZE = 100          # spectrogram is SPEC_SIZE time frames x SPEC_SIZE frequency bins
STFT_NFFT = 198          # one-sided rfft of 198 samples -> exactly 100 bins
NORM_EPS = 1e-8          # guard for zero-variance windows

TAG_NORMAL = "normal"
TAG_ANOMALY = "anomaly"

VEHICLE_CLASS_TO_LABEL = {"light": 1, "heavy": 2}


@dataclass
class RawRecording:
    """Uniformly sampled z-axis acceleration, optionally with per-sample labels.

    Labels take values in {0, 1, 2}: 0 = no vehicle, 1 = light vehicle,
    2 = heavy vehicle, aligned one-to-one with ``samples``.
    """

    samples: np.ndarray
    fs: int = 100
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.samples.shape:
                raise DataError(
                    f"labels length {self.labels.shape} does not match "
                    f"samples length {self.samples.shape}"
                )

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class PipelineConfig:
    """Windowing and filtering settings for one use case.

    ``vehicle_class`` selects which label value feeds the regression target:
    "light" counts label 1, "heavy" counts label 2, "any" counts any nonzero.
    """

    window_s: float = 5.0
    stride_s: float = 2.0
    energy_threshold: float = 3.125e-5
    vehicle_class: str = "any"

    def __post_init__(self):
        if self.stride_s <= 0 or self.window_s < self.stride_s:
            raise ConfigError(
                f"need window_s >= stride_s > 0, got {self.window_s}/{self.stride_s}"
            )
        if self.energy_threshold < 0:
            raise ConfigError("energy_threshold must be >= 0")
        if self.vehicle_class not in ("light", "heavy", "any"):
            raise ConfigError(f"unknown vehicle_class {self.vehicle_class!r}")


# Built-in defaults mirroring the two window regimes (5 s and 60 s).
UC1_PIPELINE = PipelineConfig(window_s=5.0, stride_s=2.0, energy_threshold=3.125e-5)
UC2_PIPELINE = PipelineConfig(window_s=60.0, stride_s=2.0, energy_threshold=1.25e-6)
UC3_PIPELINE = PipelineConfig(window_s=60.0, stride_s=15.0, energy_threshold=1.25e-6)


@dataclass
class TimeWindow:
    """One fixed-length slice of a recording plus its pre-normalization energy."""

    values: np.ndarray
    start_index: int
    raw_energy: float


@dataclass
class SpectrogramWindow:
    """Model input: a standardized 100x100 time-frequency image.

    ``target`` is the scalar traffic value (vehicles per window, possibly
    fractional); ``tag`` is "normal"/"anomaly" for detection datasets.
    """

    image: np.ndarray
    target: Optional[float] = None
    tag: Optional[str] = None
    start_index: int = 0


def window_energy(values: np.ndarray) -> float:
    """Mean squared de-meaned amplitude: (1/T) * sum((x - mean(x))^2)."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean((values - values.mean()) ** 2))


def make_windows(rec: RawRecording, cfg: PipelineConfig) -> list[TimeWindow]:
    """Slice a recording into overlapping windows of fs*window_s samples.

    Windows start at offsets 0, fs*stride_s, 2*fs*stride_s, ...; trailing
    partial windows are dropped.
    """
    n = len(rec)
    if n == 0:
        raise EmptyInputError("cannot window an empty recording")
    win = int(round(rec.fs * cfg.window_s))
    hop = int(round(rec.fs * cfg.stride_s))
    if n < win:
        return []
    count = (n - win) // hop + 1
    out = []
    for i in range(count):
        start = i * hop
        values = rec.samples[start:start + win]
        out.append(TimeWindow(values=values, start_index=start,
                              raw_energy=window_energy(values)))
    return out


def energy_keep(w: TimeWindow, th: float) -> bool:
    """True iff the window's pre-normalization energy reaches the threshold."""
    return w.raw_energy >= th


def normalize(w: TimeWindow) -> TimeWindow:
    """Standardize to zero mean / unit standard deviation.

    Zero-variance windows map to all zeros through the epsilon guard; the
    energy filter removes them in practice.
    """
    x = w.values
    std = float(np.std(x))
    values = (x - x.mean()) / (std + NORM_EPS)
    return TimeWindow(values=values, start_index=w.start_index, raw_energy=w.raw_energy)


def _stft_frames(values: np.ndarray) -> tuple[np.ndarray, int]:
    t = values.shape[0]
    hop = (t - STFT_NFFT) // (SPEC_SIZE - 1)
    if hop < 1:
        raise ConfigError(
            f"window of {t} samples is too short for {SPEC_SIZE} spectrogram frames "
            f"(needs at least {STFT_NFFT + SPEC_SIZE - 1})"
        )
    starts = np.arange(SPEC_SIZE) * hop
    frames = values[starts[:, None] + np.arange(STFT_NFFT)[None, :]]
    return frames, hop


def spectrogram(w: TimeWindow) -> np.ndarray:
    """100x100 standardized log-magnitude spectrogram of a normalized window.

    Rows are time frames, columns frequency bins. Frames are Hann-windowed
    slices of 198 samples with hop floor((T-198)/99); log(1+|rfft|) is taken
    per cell and the whole image standardized to zero mean / unit std.
    """
    frames, _ = _stft_frames(np.asarray(w.values, dtype=np.float64))
    taper = get_window("hann", STFT_NFFT)
    mag = np.abs(np.fft.rfft(frames * taper, axis=1))
    img = np.log1p(mag)
    img = (img - img.mean()) / (img.std() + NORM_EPS)
    return img


def freq_bin_of(freq_hz: float, fs: int) -> int:
    """Spectrogram column index nearest a physical frequency."""
    return int(round(freq_hz * STFT_NFFT / fs))


def compute_target(labels: np.ndarray, k) -> float:
    """Scalar traffic target: count of samples labeled with class k, over 10.

    ``k`` is 1 (light), 2 (heavy), or "any" for any nonzero label. Fractional
    values occur when a window boundary cuts a 10-sample label group.
    """
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (0, 1, 2))
    if bad.any():
        raise DataError(f"labels outside {{0,1,2}} at {np.flatnonzero(bad)[:5]}")
    if k == "any":
        count = int(np.count_nonzero(labels))
    elif k in (1, 2):
        count = int(np.count_nonzero(labels == k))
    else:
        raise ConfigError(f"class selector must be 1, 2 or 'any', got {k!r}")
    return count / 10.0


@dataclass
class DatasetBuildResult:
    """Output of build_dataset: kept windows plus filter bookkeeping."""

    windows: list[SpectrogramWindow] = field(default_factory=list)
    n_candidates: int = 0
    n_dropped: int = 0


def build_dataset(
    recs: Sequence[RawRecording],
    cfg: PipelineConfig,
    tags: Optional[Sequence[Optional[str]]] = None,
) -> DatasetBuildResult:
    """Window, energy-filter, normalize, and spectrogram a set of recordings.

    ``tags`` optionally assigns one "normal"/"anomaly" tag per recording to all
    of its windows. Temporal order is preserved within each recording; the
    returned result also records how many candidate windows the energy filter
    dropped.
    """
    if tags is not None and len(tags) != len(recs):
        raise DataError("tags must align one-to-one with recordings")
    fs = {rec.fs for rec in recs}
    if len(fs) > 1:
        raise DataError(f"recordings mix sampling rates {sorted(fs)}")

    k = VEHICLE_CLASS_TO_LABEL.get(cfg.vehicle_class, "any")
    result = DatasetBuildResult()
    for r, rec in enumerate(recs):
        tag = tags[r] if tags is not None else None
        for w in make_windows(rec, cfg):
            result.n_candidates += 1
            if not energy_keep(w, cfg.energy_threshold):
                result.n_dropped += 1
                continue
            image = spectrogram(normalize(w))
            target = None
            if rec.labels is not None:
                sl = rec.labels[w.start_index:w.start_index + len(w.values)]
                target = compute_target(sl, k)
            result.windows.append(SpectrogramWindow(
                image=image, target=target, tag=tag, start_index=w.start_index))
    if result.n_candidates and not result.windows:
        logger.warning("energy filter dropped all %d candidate windows", result.n_dropped)
    return result


def chronological_split(items: Sequence, train_frac: float) -> tuple[list, list]:
    """Split a temporally ordered sequence into leading train / trailing test."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"train_frac must be in (0,1), got {train_frac}")
    n_train = int(len(items) * train_frac)
    return list(items[:n_train]), list(items[n_train:])
