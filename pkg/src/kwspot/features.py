"""Log-mel filter-bank features, global CMVN, and feature-level masking.

The front end is deliberately plain: 25 ms windows shifted by 10 ms,
per-frame pre-emphasis, a Povey-shaped window, magnitude-squared FFT,
triangular mel weighting, and a floored natural log.  Dither is disabled so
every run is bit-deterministic.  All operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyManifest, InvalidConfig, TooShort


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end geometry.  fft_size is derived when left unset."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    shift_ms: float = 10.0
    num_mels: int = 40
    low_freq: float = 20.0
    high_freq: float | None = None  # None means Nyquist
    log_floor: float = 1e-10
    preemphasis: float = 0.97
    fft_size: int | None = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        if self.shift_ms > self.window_ms:
            raise InvalidConfig("shift_ms must not exceed window_ms")
        if self.num_mels < 1:
            raise InvalidConfig("num_mels must be >= 1")
        if self.log_floor <= 0:
            raise InvalidConfig("log_floor must be positive")
        if self.window_samples < 2:
            raise InvalidConfig("window shorter than 2 samples")
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", _next_pow2(self.window_samples))
        elif self.fft_size < self.window_samples:
            raise InvalidConfig("fft_size smaller than the analysis window")
        high = self.sample_rate / 2.0 if self.high_freq is None else self.high_freq
        if not (0.0 <= self.low_freq < high <= self.sample_rate / 2.0):
            raise InvalidConfig("mel filter bounds out of range")

    @property
    def window_samples(self) -> int:
        return int(self.sample_rate * self.window_ms / 1000.0)

    @property
    def shift_samples(self) -> int:
        return int(self.sample_rate * self.shift_ms / 1000.0)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_samples:
            return 0
        return 1 + (num_samples - self.window_samples) // self.shift_samples

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "window_ms": self.window_ms,
            "shift_ms": self.shift_ms,
            "num_mels": self.num_mels,
            "low_freq": self.low_freq,
            "high_freq": self.high_freq,
            "log_floor": self.log_floor,
            "preemphasis": self.preemphasis,
            "fft_size": self.fft_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown feature config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FeatureMatrix:
    """[frames x num_mels] grid of log-energies."""

    values: np.ndarray
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1:
            raise DimensionMismatch(f"feature matrix must be [T, D], got {v.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CmvnStats:
    mean: np.ndarray
    inv_stddev: np.ndarray
    frame_count: int

    def __post_init__(self):
        if self.mean.shape != self.inv_stddev.shape:
            raise DimensionMismatch("cmvn mean/inv_stddev shapes differ")
        if np.any(self.inv_stddev <= 0):
            raise InvalidConfig("cmvn inv_stddev must be strictly positive")
        if self.frame_count < 2:
            raise InvalidConfig("cmvn needs at least 2 frames")

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "inv_stddev": [float(v) for v in self.inv_stddev],
            "frame_count": int(self.frame_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CmvnStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            inv_stddev=np.asarray(d["inv_stddev"], dtype=np.float64),
            frame_count=int(d["frame_count"]),
        )


@dataclass(frozen=True)
class SpecAugmentPolicy:
    """Up to num_* masks, each of width uniform in [0, *_max] inclusive."""

    num_time_masks: int = 2
    time_mask_max: int = 50
    num_freq_masks: int = 2
    freq_mask_max: int = 10

    @property
    def enabled(self) -> bool:
        return (self.num_time_masks > 0 and self.time_mask_max > 0) or (
            self.num_freq_masks > 0 and self.freq_mask_max > 0
        )


_MEL_CACHE: dict[tuple, np.ndarray] = {}


def _hz_to_mel(f):
    return 1127.0 * np.log(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters as a [fft_bins x num_mels] float64 matrix.

    Triangle weights are computed on the mel scale between num_mels + 2
    equally spaced mel points from low_freq to high_freq.
    """
    high = cfg.sample_rate / 2.0 if cfg.high_freq is None else cfg.high_freq
    key = (cfg.sample_rate, cfg.fft_size, cfg.num_mels, cfg.low_freq, high)
    cached = _MEL_CACHE.get(key)
    if cached is not None:
        return cached
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins, dtype=np.float64) * cfg.sample_rate / cfg.fft_size
    bin_mels = _hz_to_mel(bin_freqs)
    points = np.linspace(_hz_to_mel(cfg.low_freq), _hz_to_mel(high), cfg.num_mels + 2)
    left = points[:-2]
    center = points[1:-1]
    right = points[2:]
    up = (bin_mels[:, None] - left[None, :]) / (center - left)[None, :]
    down = (right[None, :] - bin_mels[:, None]) / (right - center)[None, :]
    weights = np.maximum(0.0, np.minimum(up, down))
    _MEL_CACHE[key] = weights
    return weights


def povey_window(n: int) -> np.ndarray:
    base = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    return np.power(base, 0.85)


def fbank(clip, cfg: FeatureConfig) -> FeatureMatrix:
    """Log-mel energies for one clip.

    clip must expose .samples (float array in [-1, 1]) and .sample_rate.
    Frame count is exactly 1 + floor((samples - window) / shift).
    """
    if clip.sample_rate != cfg.sample_rate:
        raise DimensionMismatch(
            f"clip at {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    x = np.asarray(clip.samples, dtype=np.float64)
    win = cfg.window_samples
    if x.shape[0] < win:
        raise TooShort(f"clip of {x.shape[0]} samples is shorter than one window ({win})")
    hop = cfg.shift_samples
    n_frames = cfg.num_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]

    # per-frame pre-emphasis; the first sample is emphasized against itself
    pre = np.empty((n_frames, win), dtype=np.float64)
    pre[:, 1:] = frames[:, 1:] - cfg.preemphasis * frames[:, :-1]
    pre[:, 0] = frames[:, 0] - cfg.preemphasis * frames[:, 0]

    pre *= povey_window(win)
    spec = np.fft.rfft(pre, n=cfg.fft_size, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg)
    values = np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)
    return FeatureMatrix(values=values, frame_shift_ms=cfg.shift_ms)


def compute_cmvn(manifest, cfg: FeatureConfig) -> CmvnStats:
    """Global mean / population stddev over all frames of all utterances.

    No augmentation is applied; clips at other rates are resampled to the
    config rate first, matching the training front end.
    """
    from .dataio import read_wav, resample  # local import avoids a cycle

    entries = list(manifest)
    if not entries:
        raise EmptyManifest("cmvn needs at least one utterance")
    total = np.zeros(cfg.num_mels, dtype=np.float64)
    total_sq = np.zeros(cfg.num_mels, dtype=np.float64)
    count = 0
    for entry in entries:
        clip = resample(read_wav(entry.wav), cfg.sample_rate)
        values = fbank(clip, cfg).values.astype(np.float64)
        total += values.sum(axis=0)
        total_sq += (values * values).sum(axis=0)
        count += values.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    stddev = np.sqrt(var)
    inv_stddev = 1.0 / np.maximum(stddev, 1e-6)
    return CmvnStats(mean=mean, inv_stddev=inv_stddev, frame_count=count)


def apply_cmvn(feat: FeatureMatrix, stats: CmvnStats) -> FeatureMatrix:
    if feat.values.shape[1] != stats.mean.shape[0]:
        raise DimensionMismatch(
            f"feature dim {feat.values.shape[1]} != cmvn dim {stats.mean.shape[0]}"
        )
    out = (feat.values - stats.mean.astype(np.float32)) * stats.inv_stddev.astype(
        np.float32
    )
    return FeatureMatrix(values=out.astype(np.float32), frame_shift_ms=feat.frame_shift_ms)


def spec_augment(
    feat: FeatureMatrix, policy: SpecAugmentPolicy, rng_seed: int
) -> FeatureMatrix:
    """Zero out random time and frequency stripes, deterministically.

    Widths are drawn uniformly from [0, max] inclusive (capped by the axis
    extent), starts uniformly so each mask lies fully inside the matrix.
    Draw order: time masks first (width then start), then frequency masks.
    """
    if not policy.enabled:
        return feat
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    values = feat.values.copy()
    t, d = values.shape
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, min(policy.time_mask_max, t) + 1))
        start = int(rng.integers(0, t - width + 1))
        if width:
            values[start : start + width, :] = 0.0
    for _ in range(policy.num_freq_masks):
        width = int(rng.integers(0, min(policy.freq_mask_max, d) + 1))
        start = int(rng.integers(0, d - width + 1))
        if width:
            values[:, start : start + width] = 0.0
    return FeatureMatrix(values=values, frame_shift_ms=feat.frame_shift_ms)
