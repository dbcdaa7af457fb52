"""Scoring and detection-error metrics.

A test utterance is reduced to one peak score per keyword (its maximum
frame posterior over valid frames).  For keyword k, utterances labeled k
are positives and everything else is a negative, so FRR counts missed
positives in percent while FAH counts negative utterances whose peak
crosses the threshold, normalized by the total negative audio hours.
Each negative utterance contributes at most one alarm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataio import ManifestEntry, PipelineConfig, make_batch, wav_duration_seconds
from .errors import (
    InvalidConfig,
    NegativeLabelPresent,
    NoNegatives,
    NoPositives,
    TargetUnreachable,
)
from .models import POSTERIOR_CLAMP_HI, POSTERIOR_CLAMP_LO, KwsModel, forward

DEFAULT_THRESHOLDS = 1001


@dataclass(frozen=True)
class ScoreRecord:
    key: str
    label: int
    peak_scores: tuple[float, ...]  # one per keyword
    duration_seconds: float

    def __post_init__(self):
        if self.duration_seconds <= 0:
            raise InvalidConfig(f"{self.key}: non-positive duration")


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray
    fah: np.ndarray  # alarms per hour, non-increasing
    frr: np.ndarray  # percent, non-decreasing

    def points(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(a), float(r))
            for t, a, r in zip(self.thresholds, self.fah, self.frr)
        ]


def score_manifest(
    model: KwsModel, entries: list[ManifestEntry], batch_size: int = 64
) -> list[ScoreRecord]:
    """Offline peak scores per utterance; padding never enters the peaks."""
    pipeline = PipelineConfig(features=model.feature_config, augment=False)
    records = []
    for lo in range(0, len(entries), batch_size):
        chunk = entries[lo : lo + batch_size]
        batch = make_batch(chunk, pipeline, seed=0)
        posts = forward(model, batch)
        for entry, seq in zip(chunk, posts):
            peaks = seq.values.max(axis=0)
            records.append(
                ScoreRecord(
                    key=entry.key,
                    label=entry.label,
                    peak_scores=tuple(float(p) for p in peaks),
                    duration_seconds=wav_duration_seconds(entry.wav),
                )
            )
    return records


def det_curve(
    scores: list[ScoreRecord], keyword: int, thresholds: np.ndarray | None = None
) -> DetCurve:
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, DEFAULT_THRESHOLDS)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    pos = np.array([r.peak_scores[keyword] for r in scores if r.label == keyword])
    neg_records = [r for r in scores if r.label != keyword]
    neg = np.array([r.peak_scores[keyword] for r in neg_records])
    if pos.size == 0:
        raise NoPositives(f"no utterances labeled {keyword}")
    if neg.size == 0:
        raise NoNegatives(f"no negative utterances for keyword {keyword}")
    hours = sum(r.duration_seconds for r in neg_records) / 3600.0
    misses = (pos[None, :] < thresholds[:, None]).sum(axis=1)
    alarms = (neg[None, :] >= thresholds[:, None]).sum(axis=1)
    frr = 100.0 * misses / pos.size
    fah = alarms / hours
    return DetCurve(thresholds=thresholds, fah=fah, frr=frr)


def frr_at_fah(curve: DetCurve, target_fah: float) -> float:
    """FRR at the smallest threshold whose FAH is within the target."""
    ok = np.nonzero(curve.fah <= target_fah)[0]
    if ok.size == 0:
        raise TargetUnreachable(
            f"FAH stays above {target_fah} on the whole threshold grid "
            f"(minimum {curve.fah.min():.3f})"
        )
    return float(curve.frr[ok[0]])


def classify_accuracy(model: KwsModel, entries: list[ManifestEntry]) -> float:
    """Percent of utterances whose argmax peak head matches the label.

    Ties go to the lowest keyword index.  Every entry must carry a
    non-negative label.
    """
    bad = [e.key for e in entries if e.label < 0]
    if bad:
        raise NegativeLabelPresent(f"utterances without keyword labels: {bad[:4]}")
    records = score_manifest(model, entries)
    correct = sum(
        1 for r in records if int(np.argmax(np.asarray(r.peak_scores))) == r.label
    )
    return 100.0 * correct / len(records)


# ---------------------------------------------------------------------------
# file formats


def save_scores(records: list[ScoreRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "key": r.key,
                        "label": r.label,
                        "peak_scores": list(r.peak_scores),
                        "duration_seconds": r.duration_seconds,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_scores(path: str) -> list[ScoreRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                ScoreRecord(
                    key=obj["key"],
                    label=int(obj["label"]),
                    peak_scores=tuple(float(v) for v in obj["peak_scores"]),
                    duration_seconds=float(obj["duration_seconds"]),
                )
            )
    return records


def save_det_csv(curve: DetCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fah,frr\n")
        for t, a, r in curve.points():
            fh.write(f"{t:.6f},{a:.6f},{r:.6f}\n")


def load_det_csv(path: str) -> DetCurve:
    ts, fahs, frrs = [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "threshold,fah,frr":
            raise InvalidConfig(f"{path}: unexpected DET header {header!r}")
        for line in fh:
            t, a, r = line.strip().split(",")
            ts.append(float(t))
            fahs.append(float(a))
            frrs.append(float(r))
    return DetCurve(
        thresholds=np.asarray(ts), fah=np.asarray(fahs), frr=np.asarray(frrs)
    )


def peak_scores_streaming(
    model, entries: list[ManifestEntry], chunk_samples: int, push_fn
) -> list[np.ndarray]:
    """Per-utterance streamed peaks; used to check chunking independence."""
    from .dataio import read_wav, resample
    from .detector import make_stream, reset

    fcfg = model.feature_config
    state = make_stream(model)
    out = []
    for entry in entries:
        reset(state)
        clip = resample(read_wav(entry.wav), fcfg.sample_rate)
        peaks = np.full(model.num_keywords, POSTERIOR_CLAMP_LO, dtype=np.float64)
        for lo in range(0, clip.samples.shape[0], chunk_samples):
            _, post, _ = push_fn(state, model, clip.samples[lo : lo + chunk_samples])
            if post.shape[0]:
                peaks = np.maximum(peaks, post.max(axis=0))
        out.append(np.minimum(peaks, POSTERIOR_CLAMP_HI))
    return out
