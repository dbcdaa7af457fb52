"""Manifests, WAV audio, waveform augmentation, and batch assembly.

Manifests are UTF-8 JSON Lines, one utterance per line with fields
key / wav / label (-1 for non-keyword) and optional end_frame and
duration_frames; unknown fields are ignored.  Audio is RIFF WAVE,
16-bit PCM mono only.

Batch assembly is a pure function of (entries, pipeline, seed): every
random decision is drawn from a generator seeded by the batch seed mixed
with a hash of the utterance key, so results do not depend on batch
composition or worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    KwsError,
    MalformedWav,
    ManifestError,
    UnsupportedFormat,
)
from .features import FeatureConfig, SpecAugmentPolicy, fbank, spec_augment

SINC_TAPS = 16  # taps per side of the band-limited interpolator


@dataclass(frozen=True)
class ManifestEntry:
    key: str
    wav: str
    label: int
    end_frame: int | None = None
    duration_frames: int | None = None

    def __post_init__(self):
        if self.label < -1:
            raise ManifestError(f"{self.key}: label must be >= -1, got {self.label}")
        if self.end_frame is not None and self.end_frame < 1:
            raise ManifestError(f"{self.key}: end_frame must be >= 1")


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.shape[0] == 0:
            raise MalformedWav("audio clip must be a non-empty 1-d signal")
        if self.sample_rate <= 0:
            raise MalformedWav("sample rate must be positive")

    @property
    def duration_seconds(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class Batch:
    """Padded feature grid plus per-utterance bookkeeping.

    end_frames uses -1 for "absent" so the whole batch stays numeric.
    """

    features: np.ndarray  # [B, T, D] float32, zero beyond lengths[i]
    lengths: np.ndarray  # [B] int64
    labels: np.ndarray  # [B] int64
    end_frames: np.ndarray  # [B] int64, -1 when unknown
    keys: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.features.shape[0]


def load_manifest(path: str) -> list[ManifestEntry]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}:{lineno}: entry must be an object")
        try:
            key = obj["key"]
            wav = obj["wav"]
            label = int(obj["label"])
        except KeyError as e:
            raise ManifestError(f"{path}:{lineno}: missing field {e}") from e
        if key in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        end_frame = obj.get("end_frame")
        duration = obj.get("duration_frames")
        try:
            entries.append(
                ManifestEntry(
                    key=key,
                    wav=wav,
                    label=label,
                    end_frame=None if end_frame is None else int(end_frame),
                    duration_frames=None if duration is None else int(duration),
                )
            )
        except ManifestError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
    return entries


def save_manifest(entries, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            obj = {"key": e.key, "wav": e.wav, "label": e.label}
            if e.end_frame is not None:
                obj["end_frame"] = e.end_frame
            if e.duration_frames is not None:
                obj["duration_frames"] = e.duration_frames
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_wav(path: str) -> AudioClip:
    """Strict RIFF/WAVE reader: 16-bit PCM, mono, little-endian."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise MalformedWav(f"cannot read {path}: {e}") from e
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16 or len(body) < 16:
                raise MalformedWav(f"{path}: fmt chunk truncated")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            if len(body) < size:
                raise MalformedWav(f"{path}: data chunk truncated")
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormat(f"{path}: not integer PCM (format tag {audio_format})")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: expected mono, got {channels} channels")
    if bits != 16:
        raise UnsupportedFormat(f"{path}: expected 16-bit samples, got {bits}")
    if sample_rate <= 0:
        raise MalformedWav(f"{path}: bad sample rate {sample_rate}")
    if len(data) == 0:
        raise MalformedWav(f"{path}: empty data chunk")
    if len(data) % 2:
        raise MalformedWav(f"{path}: odd data chunk size for 16-bit samples")
    raw = np.frombuffer(data, dtype="<i2")
    samples = raw.astype(np.float32) / 32768.0
    return AudioClip(samples=samples, sample_rate=sample_rate)


def wav_duration_seconds(path: str) -> float:
    """Duration from the header alone; no sample decoding."""
    try:
        with wave.open(path, "rb") as fh:
            rate = fh.getframerate()
            if rate <= 0:
                raise MalformedWav(f"{path}: bad sample rate {rate}")
            return fh.getnframes() / rate
    except wave.Error as e:
        raise MalformedWav(f"{path}: {e}") from e
    except OSError as e:
        raise MalformedWav(f"cannot read {path}: {e}") from e


def write_wav(path: str, samples: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM mono writer used by corpus tooling."""
    q = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(q.astype("<i2").tobytes())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _kernel_weights(frac: np.ndarray, cutoff: float) -> np.ndarray:
    """Windowed-sinc taps for each fractional sample position in `frac`."""
    taps = SINC_TAPS
    offsets = np.arange(-taps + 1, taps + 1)  # 2*taps kernel positions
    u = frac[:, None] - offsets[None, :]  # in (-taps, taps)
    w = cutoff * np.sinc(cutoff * u)
    w *= 0.5 + 0.5 * np.cos(np.pi * u / taps)
    return w


def _pad_signal(x: np.ndarray) -> tuple[np.ndarray, int]:
    pad = SINC_TAPS + 4
    xp = np.zeros(x.shape[0] + 2 * pad, dtype=np.float64)
    xp[pad : pad + x.shape[0]] = x
    return xp, pad


def _sinc_interp(x: np.ndarray, step: float, out_len: int, cutoff: float) -> np.ndarray:
    """y[n] = x(n*step) via windowed-sinc interpolation (SINC_TAPS per side)."""
    taps = SINC_TAPS
    xp, pad = _pad_signal(x)
    offsets = np.arange(-taps + 1, taps + 1)
    out = np.empty(out_len, dtype=np.float64)
    chunk = 1 << 16
    for start in range(0, out_len, chunk):
        n = np.arange(start, min(start + chunk, out_len), dtype=np.float64)
        t = n * step
        base = np.floor(t).astype(np.int64)
        w = _kernel_weights(t - base, cutoff)
        idx = base[:, None] + offsets[None, :] + pad
        out[start : start + n.shape[0]] = np.einsum("ij,ij->i", xp[idx], w)
    return out


def _sinc_interp_rational(
    x: np.ndarray, p: int, q: int, out_len: int, cutoff: float
) -> np.ndarray:
    """y[n] = x(n*p/q) with exact integer phase arithmetic.

    The fractional positions cycle through q values, so the kernel table has
    only q rows and the per-sample work collapses to a gather plus a short
    dot product.  Agrees with _sinc_interp to float rounding noise.
    """
    taps = SINC_TAPS
    xp, pad = _pad_signal(x)
    offsets = np.arange(-taps + 1, taps + 1)
    table = _kernel_weights(np.arange(q, dtype=np.float64) / q, cutoff)
    out = np.empty(out_len, dtype=np.float64)
    chunk = 1 << 16
    for start in range(0, out_len, chunk):
        n = np.arange(start, min(start + chunk, out_len), dtype=np.int64)
        tnum = n * p
        base = tnum // q
        phase = tnum - base * q
        idx = base[:, None] + offsets[None, :] + pad
        out[start : start + n.shape[0]] = np.einsum("ij,ij->i", xp[idx], table[phase])
    return out


# largest denominator worth a polyphase table; beyond this the generic
# per-sample kernel evaluation is used instead
_MAX_POLYPHASE_DEN = 1024


def _resample_core(x: np.ndarray, step: float, out_len: int, cutoff: float) -> np.ndarray:
    frac = Fraction(step).limit_denominator(_MAX_POLYPHASE_DEN)
    if float(frac) == step and frac.denominator <= _MAX_POLYPHASE_DEN:
        return _sinc_interp_rational(x, frac.numerator, frac.denominator, out_len, cutoff)
    return _sinc_interp(x, step, out_len, cutoff)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion; exact identity when rates match."""
    if target_rate <= 0:
        raise MalformedWav(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    ratio = target_rate / clip.sample_rate
    out_len = _round_half_up(clip.samples.shape[0] * ratio)
    cutoff = min(1.0, ratio)
    x = np.asarray(clip.samples, dtype=np.float64)
    g = math.gcd(clip.sample_rate, target_rate)
    p, q = clip.sample_rate // g, target_rate // g
    if q <= _MAX_POLYPHASE_DEN:
        y = _sinc_interp_rational(x, p, q, out_len, cutoff)
    else:
        y = _sinc_interp(x, 1.0 / ratio, out_len, cutoff)
    return AudioClip(samples=y.astype(np.float32), sample_rate=target_rate)


def speed_perturb(clip: AudioClip, factor: float) -> AudioClip:
    """Sox-style speed effect: resample the time axis, pitch moves with it."""
    if factor <= 0:
        raise MalformedWav(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return clip
    out_len = _round_half_up(clip.samples.shape[0] / factor)
    cutoff = min(1.0, 1.0 / factor)
    y = _resample_core(np.asarray(clip.samples, dtype=np.float64), factor, out_len, cutoff)
    return AudioClip(samples=y.astype(np.float32), sample_rate=clip.sample_rate)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything make_batch needs to turn manifest entries into features."""

    features: FeatureConfig = field(default_factory=FeatureConfig)
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    augment: bool = True
    masks: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)


def _key_hash(key: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little"
    )


def _entry_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _key_hash(key)))))


def _process_entry(entry: ManifestEntry, pipeline: PipelineConfig, seed: int):
    cfg = pipeline.features
    rng = _entry_rng(seed, entry.key)
    try:
        clip = read_wav(entry.wav)
        clip = resample(clip, cfg.sample_rate)
    except KwsError as e:
        raise type(e)(f"{entry.key}: {e}") from e
    if pipeline.augment:
        factor = float(pipeline.speed_factors[rng.integers(len(pipeline.speed_factors))])
        mask_seed = int(rng.integers(np.iinfo(np.int64).max))
    else:
        factor = 1.0
        mask_seed = 0
    try:
        clip = speed_perturb(clip, factor)
        feat = fbank(clip, cfg)
    except KwsError as e:
        raise type(e)(f"{entry.key}: {e}") from e
    if pipeline.augment and pipeline.masks.enabled:
        feat = spec_augment(feat, pipeline.masks, mask_seed)
    end_frame = -1
    if entry.end_frame is not None:
        # the keyword end moves with the speed factor; keep it inside [1, N]
        end_frame = min(max(1, _round_half_up(entry.end_frame / factor)), feat.num_frames)
    return feat.values, entry.label, end_frame


def make_batch(
    entries: list[ManifestEntry],
    pipeline: PipelineConfig,
    seed: int,
    num_workers: int = 0,
) -> Batch:
    """Assemble one padded training batch.

    Bit-identical for identical (entries, pipeline, seed) regardless of
    num_workers; padding rows beyond each utterance's length are zero.
    """
    if not entries:
        raise ManifestError("make_batch: no entries")
    if num_workers and num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            results = list(pool.map(lambda e: _process_entry(e, pipeline, seed), entries))
    else:
        results = [_process_entry(e, pipeline, seed) for e in entries]
    lengths = np.array([r[0].shape[0] for r in results], dtype=np.int64)
    dim = results[0][0].shape[1]
    t_max = int(lengths.max())
    features = np.zeros((len(entries), t_max, dim), dtype=np.float32)
    for i, (values, _, _) in enumerate(results):
        features[i, : values.shape[0], :] = values
    labels = np.array([r[1] for r in results], dtype=np.int64)
    end_frames = np.array([r[2] for r in results], dtype=np.int64)
    return Batch(
        features=features,
        lengths=lengths,
        labels=labels,
        end_frames=end_frames,
        keys=tuple(e.key for e in entries),
    )
