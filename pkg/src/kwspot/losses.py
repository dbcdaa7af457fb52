"""Training objectives over per-frame keyword posteriors.

The primary objective is max-pooling cross-entropy: for a positive
utterance the loss reads the single highest posterior inside the allowed
window (frames m+1..N, 1-based), for a negative utterance the highest
posterior anywhere, so the model picks its own firing frame and no
alignments are needed.  Three comparison objectives constrain the picked
frame around a known keyword end timestamp instead.

Conventions shared by all four objectives are handled in one builder:
windows are selected on raw posterior values, the selected statistic is
clamped into [1e-8, 1-1e-8] and only then logged, a keyword-k utterance is
a negative example for every other head, and padded frames never enter any
window.  Gradients flow only through the selected frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import (
    EmptyBatch,
    InvalidConfig,
    MinDurationTooLarge,
    MissingEndFrame,
    NoPositives,
)
from .models import POSTERIOR_CLAMP_HI, POSTERIOR_CLAMP_LO

_KINDS = ("max_pooling", "vad_mean", "vad_max", "weakly_constraint")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "max_pooling"
    min_duration_frames: int = 0
    vad_mean_interval: int = 5
    vad_max_range: int = 40
    constraint_epochs: int = 5

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidConfig(f"unknown loss kind {self.kind!r}")
        if self.min_duration_frames < 0:
            raise InvalidConfig("min_duration_frames must be >= 0")
        if self.vad_mean_interval < 1 or self.vad_max_range < 1:
            raise InvalidConfig("loss windows must be >= 1 frame")
        if self.constraint_epochs < 0:
            raise InvalidConfig("constraint_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "min_duration_frames": self.min_duration_frames,
            "vad_mean_interval": self.vad_mean_interval,
            "vad_max_range": self.vad_max_range,
            "constraint_epochs": self.constraint_epochs,
        }


@dataclass
class LossResult:
    """value is the graph-carrying scalar; value == mean(per_utterance)."""

    value: nn.Tensor
    per_utterance: np.ndarray  # [B] float
    selected_frame: np.ndarray  # [B] int64, 1-based for positives, -1 otherwise


def _as_i64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64)


def _positive_windows_from_end(
    labels: np.ndarray, lengths: np.ndarray, end_frames, width: int
) -> tuple[np.ndarray, np.ndarray]:
    """0-based half-open [lo, hi) windows ending at each positive's end frame."""
    b = labels.shape[0]
    if end_frames is None:
        end_frames = np.full(b, -1, dtype=np.int64)
    else:
        end_frames = _as_i64(end_frames)
    lo = np.zeros(b, dtype=np.int64)
    hi = np.zeros(b, dtype=np.int64)
    for i in range(b):
        if labels[i] < 0:
            continue
        if end_frames[i] < 1:
            raise MissingEndFrame(
                f"utterance {i}: positive without end_frame under a constrained loss"
            )
        e = int(min(end_frames[i], lengths[i]))  # 1-based, inside the utterance
        lo[i] = max(0, e - width)
        hi[i] = e
    return lo, hi


def _build(
    posteriors: nn.Tensor,
    labels,
    lengths,
    pos_lo: np.ndarray,
    pos_hi: np.ndarray,
    pos_mode: str,
) -> LossResult:
    """Shared core: select one statistic per (utterance, head), then BCE.

    pos_lo/pos_hi give the 0-based half-open frame window for each positive
    utterance's own head; mode is "max" or "mean".  Every other
    (utterance, head) pair takes the max over all valid frames and is
    treated as a negative.
    """
    p = posteriors.data
    if p.ndim != 3:
        raise EmptyBatch(f"posterior grid must be [B, T, K], got {p.shape}")
    b, t, k = p.shape
    if b == 0:
        raise EmptyBatch("empty posterior batch")
    labels = _as_i64(labels)
    lengths = _as_i64(lengths)

    valid = np.arange(t)[None, :] < lengths[:, None]  # [B, T]
    masked = np.where(valid[:, :, None], p, -np.inf)
    idx = masked.argmax(axis=1)  # [B, K] negative-branch argmax

    pos_mask = np.zeros((b, k), dtype=p.dtype)
    selected_frame = np.full(b, -1, dtype=np.int64)
    mean_weights = None
    for i in range(b):
        lab = int(labels[i])
        if lab < 0:
            continue
        if lab >= k:
            raise InvalidConfig(f"label {lab} but model has {k} heads")
        lo, hi = int(pos_lo[i]), int(pos_hi[i])
        window = p[i, lo:hi, lab]
        j = int(np.argmax(window))
        selected_frame[i] = lo + j + 1  # report 1-based
        pos_mask[i, lab] = 1.0
        if pos_mode == "max":
            idx[i, lab] = lo + j
        else:
            if mean_weights is None:
                mean_weights = np.zeros((b, t, k), dtype=p.dtype)
            mean_weights[i, lo:hi, lab] = 1.0 / (hi - lo)

    sel = nn.gather_time(posteriors, idx)
    if mean_weights is not None:
        mean_sel = nn.weighted_time_sum(posteriors, mean_weights)
        pick = (mean_weights.sum(axis=1) > 0).astype(p.dtype)  # [B, K]
        sel = nn.add(nn.mul(sel, 1.0 - pick), nn.mul(mean_sel, pick))

    selc = nn.clamp(sel, POSTERIOR_CLAMP_LO, POSTERIOR_CLAMP_HI)
    # the complement needs its own floor: at float32 the upper clamp bound
    # rounds to 1.0, so 1 - selc can reach exact zero on saturated heads
    comp = nn.clamp(nn.sub(1.0, selc), POSTERIOR_CLAMP_LO, 1.0)
    ll = nn.add(
        nn.mul(nn.log(selc), pos_mask),
        nn.mul(nn.log(comp), 1.0 - pos_mask),
    )
    per_utt = nn.neg(nn.sum_last(ll))
    value = nn.mean_all(per_utt)
    return LossResult(
        value=value,
        per_utterance=per_utt.data.copy(),
        selected_frame=selected_frame,
    )


def max_pooling_loss(posteriors: nn.Tensor, labels, lengths, m: int = 0) -> LossResult:
    """Cross-entropy on the windowed frame-max posterior (1-based j in m+1..N)."""
    labels = _as_i64(labels)
    lengths = _as_i64(lengths)
    if labels.shape[0] == 0:
        raise EmptyBatch("empty posterior batch")
    pos = labels >= 0
    if pos.any():
        min_pos_len = int(lengths[pos].min())
        if m >= min_pos_len:
            raise MinDurationTooLarge(
                f"m={m} leaves no frames for a positive of length {min_pos_len}"
            )
    lo = np.full(labels.shape[0], m, dtype=np.int64)
    return _build(posteriors, labels, lengths, lo, lengths, "max")


def vad_mean_loss(
    posteriors: nn.Tensor, labels, lengths, end_frames, interval: int = 5
) -> LossResult:
    """Cross-entropy on the mean posterior over the interval ending at end_frame."""
    labels = _as_i64(labels)
    lengths = _as_i64(lengths)
    lo, hi = _positive_windows_from_end(labels, lengths, end_frames, interval)
    return _build(posteriors, labels, lengths, lo, hi, "mean")


def vad_max_loss(
    posteriors: nn.Tensor, labels, lengths, end_frames, range_frames: int = 40
) -> LossResult:
    """Max-pooling restricted to the range ending at end_frame."""
    labels = _as_i64(labels)
    lengths = _as_i64(lengths)
    lo, hi = _positive_windows_from_end(labels, lengths, end_frames, range_frames)
    return _build(posteriors, labels, lengths, lo, hi, "max")


def weakly_constraint_loss(
    posteriors: nn.Tensor,
    labels,
    lengths,
    end_frames,
    epoch: int,
    constraint_epochs: int = 5,
    m: int = 0,
    range_frames: int = 40,
) -> LossResult:
    """End-frame constrained during the first constraint_epochs, then free."""
    if epoch <= constraint_epochs:
        return vad_max_loss(posteriors, labels, lengths, end_frames, range_frames)
    return max_pooling_loss(posteriors, labels, lengths, m)


def compute_loss(
    posteriors: nn.Tensor, labels, lengths, end_frames, cfg: LossConfig, epoch: int
) -> LossResult:
    """Dispatch on cfg.kind; the trainer's single entry point."""
    if cfg.kind == "max_pooling":
        return max_pooling_loss(posteriors, labels, lengths, cfg.min_duration_frames)
    if cfg.kind == "vad_mean":
        return vad_mean_loss(posteriors, labels, lengths, end_frames, cfg.vad_mean_interval)
    if cfg.kind == "vad_max":
        return vad_max_loss(posteriors, labels, lengths, end_frames, cfg.vad_max_range)
    return weakly_constraint_loss(
        posteriors,
        labels,
        lengths,
        end_frames,
        epoch,
        cfg.constraint_epochs,
        cfg.min_duration_frames,
        cfg.vad_max_range,
    )


def estimate_min_duration(
    manifest, cfg, quantile: float = 0.05, scale: float = 0.5
) -> int:
    """m = floor(scale * nearest-rank quantile of positive frame counts).

    Uses cached duration_frames when present, otherwise reads the audio and
    counts frames at the configured rate.
    """
    from .dataio import read_wav  # local import avoids a cycle

    if not 0.0 <= quantile <= 1.0:
        raise InvalidConfig("quantile must be in [0, 1]")
    lengths = []
    for entry in manifest:
        if entry.label < 0:
            continue
        if entry.duration_frames is not None:
            lengths.append(int(entry.duration_frames))
            continue
        clip = read_wav(entry.wav)
        n = clip.samples.shape[0]
        if clip.sample_rate != cfg.sample_rate:
            n = int(np.floor(n * cfg.sample_rate / clip.sample_rate + 0.5))
        lengths.append(cfg.num_frames(n))
    if not lengths:
        raise NoPositives("no positive utterances to estimate a minimum duration from")
    lengths.sort()
    rank = max(1, int(np.ceil(quantile * len(lengths))))
    return int(np.floor(scale * lengths[rank - 1]))
