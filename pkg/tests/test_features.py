"""Front-end tests: geometry, fbank against a naive DFT oracle, cmvn,
SpecAugment invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwspot.dataio import AudioClip
from kwspot.errors import DimensionMismatch, EmptyManifest, InvalidConfig, TooShort
from kwspot.features import (
    CmvnStats,
    FeatureConfig,
    FeatureMatrix,
    SpecAugmentPolicy,
    apply_cmvn,
    compute_cmvn,
    fbank,
    mel_filterbank,
    povey_window,
    spec_augment,
)


def test_config_geometry():
    cfg = FeatureConfig()
    assert cfg.window_samples == 400
    assert cfg.shift_samples == 160
    assert cfg.fft_size == 512
    cfg8 = FeatureConfig(sample_rate=8000)
    assert cfg8.window_samples == 200
    assert cfg8.shift_samples == 80
    assert cfg8.fft_size == 256


@pytest.mark.parametrize(
    "samples,expect",
    [(399, 0), (400, 1), (559, 1), (560, 2), (16000, 98)],
)
def test_num_frames(samples, expect):
    assert FeatureConfig().num_frames(samples) == expect


def test_config_rejects_bad_fft_size():
    with pytest.raises(InvalidConfig):
        FeatureConfig(fft_size=128)


def test_fbank_shape_and_dtype():
    rng = np.random.default_rng(0)
    cfg = FeatureConfig()
    clip = AudioClip(rng.standard_normal(16000).astype(np.float32) * 0.1, 16000)
    fm = fbank(clip, cfg)
    assert fm.values.shape == (98, 40)
    assert fm.values.dtype == np.float32
    assert fm.frame_shift_ms == 10


def test_fbank_rejects_rate_mismatch_and_short_clip():
    cfg = FeatureConfig()
    with pytest.raises(DimensionMismatch):
        fbank(AudioClip(np.zeros(16000, dtype=np.float32), 8000), cfg)
    with pytest.raises(TooShort):
        fbank(AudioClip(np.zeros(399, dtype=np.float32), 16000), cfg)


def test_fbank_constant_signal_frames_identical():
    cfg = FeatureConfig()
    clip = AudioClip(np.full(8000, 0.5, dtype=np.float32), 16000)
    v = fbank(clip, cfg).values
    assert np.allclose(v[1:], v[1], atol=1e-5)


def _oracle_frame(frame, cfg, mel_weights):
    """One fbank frame computed with explicit loops and a direct DFT."""
    n = frame.shape[0]
    pre = np.empty(n)
    pre[0] = frame[0] - cfg.preemphasis * frame[0]
    for i in range(1, n):
        pre[i] = frame[i] - cfg.preemphasis * frame[i - 1]
    pre = pre * povey_window(n)
    padded = np.zeros(cfg.fft_size)
    padded[:n] = pre
    k = np.arange(cfg.fft_size // 2 + 1)
    ang = -2j * np.pi * np.outer(k, np.arange(cfg.fft_size)) / cfg.fft_size
    spec = (np.exp(ang) * padded).sum(axis=1)
    power = np.abs(spec) ** 2
    return np.log(np.maximum(power @ mel_weights, cfg.log_floor))


def test_fbank_matches_naive_dft_oracle():
    rng = np.random.default_rng(7)
    cfg = FeatureConfig(sample_rate=8000, num_mels=12)
    sig = (0.3 * rng.standard_normal(1000)).astype(np.float32)
    got = fbank(AudioClip(sig, 8000), cfg).values
    x = sig.astype(np.float64)
    mel = mel_filterbank(cfg)
    for fi in range(got.shape[0]):
        frame = x[fi * cfg.shift_samples : fi * cfg.shift_samples + cfg.window_samples]
        ref = _oracle_frame(frame, cfg, mel)
        assert np.max(np.abs(got[fi] - ref)) < 1e-4, fi


def test_mel_filterbank_triangles():
    cfg = FeatureConfig(sample_rate=8000, num_mels=10)
    mel = mel_filterbank(cfg)
    assert mel.shape == (cfg.fft_size // 2 + 1, 10)
    assert (mel >= 0).all()
    assert (mel.sum(axis=0) > 0).all()
    # peak of each triangle is at most 1 and interior bins rise then fall
    assert mel.max() <= 1.0 + 1e-12


def test_mel_filterbank_independent_triangle_oracle():
    cfg = FeatureConfig(sample_rate=8000, num_mels=6, low_freq=100, high_freq=3500)
    mel = mel_filterbank(cfg)

    def hz_to_mel(f):
        return 1127.0 * np.log(1.0 + f / 700.0)

    pts = np.linspace(hz_to_mel(100), hz_to_mel(3500), 8)
    for b in range(mel.shape[0]):
        fm = hz_to_mel(b * 8000.0 / cfg.fft_size)
        for j in range(6):
            lo, c, hi = pts[j], pts[j + 1], pts[j + 2]
            if lo <= fm <= c:
                ref = (fm - lo) / (c - lo)
            elif c < fm <= hi:
                ref = (hi - fm) / (hi - c)
            else:
                ref = 0.0
            assert abs(mel[b, j] - ref) < 1e-12


def test_compute_cmvn_against_direct_moments(tone_corpus):
    stats = compute_cmvn(tone_corpus.train, tone_corpus.fcfg)
    from kwspot.dataio import read_wav

    rows = []
    for e in tone_corpus.train:
        rows.append(fbank(read_wav(e.wav), tone_corpus.fcfg).values.astype(np.float64))
    allf = np.concatenate(rows, axis=0)
    assert stats.frame_count == allf.shape[0]
    assert np.allclose(stats.mean, allf.mean(axis=0), atol=1e-9)
    assert np.allclose(1.0 / stats.inv_stddev, allf.std(axis=0), rtol=1e-9)


def test_compute_cmvn_empty_manifest():
    with pytest.raises(EmptyManifest):
        compute_cmvn([], FeatureConfig())


def test_cmvn_serialization_round_trip(tone_cmvn):
    back = CmvnStats.from_dict(tone_cmvn.to_dict())
    assert np.allclose(back.mean, tone_cmvn.mean)
    assert np.allclose(back.inv_stddev, tone_cmvn.inv_stddev)
    assert back.frame_count == tone_cmvn.frame_count


def test_cmvn_validation():
    with pytest.raises(InvalidConfig):
        CmvnStats(mean=np.zeros(3), inv_stddev=np.zeros(3), frame_count=5)
    with pytest.raises(InvalidConfig):
        CmvnStats(mean=np.zeros(3), inv_stddev=np.ones(3), frame_count=1)


def test_apply_cmvn_normalizes():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((50, 4)).astype(np.float32) * 3 + 2
    stats = CmvnStats(
        mean=v.astype(np.float64).mean(axis=0),
        inv_stddev=1.0 / v.astype(np.float64).std(axis=0),
        frame_count=50,
    )
    out = apply_cmvn(FeatureMatrix(values=v, frame_shift_ms=10), stats).values
    assert abs(out.mean()) < 1e-3
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-3)
    with pytest.raises(DimensionMismatch):
        apply_cmvn(FeatureMatrix(values=v[:, :3], frame_shift_ms=10), stats)


def test_spec_augment_deterministic_and_bounded():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((80, 16)).astype(np.float32) + 5.0
    fm = FeatureMatrix(values=v, frame_shift_ms=10)
    pol = SpecAugmentPolicy(num_time_masks=2, time_mask_max=20,
                            num_freq_masks=2, freq_mask_max=4)
    a = spec_augment(fm, pol, rng_seed=9).values
    b = spec_augment(fm, pol, rng_seed=9).values
    assert np.array_equal(a, b)
    c = spec_augment(fm, pol, rng_seed=10).values
    assert not np.array_equal(a, c)
    # masks only ever zero cells, never alter surviving ones
    changed = a != v
    assert (a[changed] == 0).all()
    # stripe budget: at most num*max rows / columns can be zeroed
    assert (changed.all(axis=1)).sum() <= 40
    assert (changed.all(axis=0)).sum() <= 8


def test_spec_augment_disabled_policy_is_identity():
    v = np.ones((10, 4), dtype=np.float32)
    fm = FeatureMatrix(values=v, frame_shift_ms=10)
    out = spec_augment(fm, SpecAugmentPolicy(0, 0, 0, 0), rng_seed=3)
    assert out is fm


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(2, 60), d=st.integers(2, 24))
def test_spec_augment_never_grows_values(seed, t, d):
    rng = np.random.default_rng(seed)
    v = np.abs(rng.standard_normal((t, d))).astype(np.float32) + 0.5
    out = spec_augment(
        FeatureMatrix(values=v, frame_shift_ms=10),
        SpecAugmentPolicy(1, 10, 1, 3),
        rng_seed=seed,
    ).values
    assert out.shape == v.shape
    assert ((out == v) | (out == 0)).all()
