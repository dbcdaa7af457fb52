"""Streaming detection: chunking equivalence, event semantics, int8 engine."""

import numpy as np
import pytest

from kwspot import nncore as nn
from kwspot.dataio import AudioClip
from kwspot.detector import (
    StreamState,
    _detect,
    load_quantized,
    make_stream,
    push_audio,
    push_audio_int8,
    quantize,
    reset,
    save_quantized,
    symmetric_quantize,
)
from kwspot.errors import InvalidConfig, SampleRateMismatch
from kwspot.features import CmvnStats, FeatureConfig, fbank
from kwspot.models import (
    BackboneConfig,
    build_model,
    default_backbone,
    fold_inference,
    forward_tensor,
)

CFG = FeatureConfig(sample_rate=16000)
D = CFG.num_mels


@pytest.fixture(scope="module")
def cmvn():
    rng = np.random.default_rng(3)
    return CmvnStats(
        mean=rng.standard_normal(D) * 0.5,
        inv_stddev=1.0 / (1.0 + 0.3 * rng.random(D)),
        frame_count=1000,
    )


@pytest.fixture(scope="module")
def audio():
    rng = np.random.default_rng(8)
    return (0.2 * rng.standard_normal(10 * 16000)).astype(np.float32)


def offline_post(model, sig):
    fm = fbank(AudioClip(sig, CFG.sample_rate), CFG)
    x = fm.values[None]
    with nn.no_grad():
        p = forward_tensor(model, x, np.array([x.shape[1]]), train=False)
    return np.clip(p.data[0], 1e-8, 1 - 1e-8).astype(np.float32)


def stream_post(model, sig, chunk, fn=push_audio):
    st = make_stream(model)
    outs = []
    for lo in range(0, len(sig), chunk):
        st, p, _ = fn(st, model, sig[lo : lo + chunk])
        outs.append(p)
    return np.concatenate(outs, axis=0), st


def small_backbone(kind):
    if kind == "mdtc":
        return BackboneConfig(kind=kind, hidden_channels=16, kernel_size=3,
                              num_layers=1, mdtc_stacks=2, mdtc_stack_layers=2)
    return BackboneConfig(kind=kind, hidden_channels=16, kernel_size=4,
                          num_layers=3, groups=4 if kind == "gdstcn" else 1)


def randomized_model(kind, cmvn, seed=5):
    m = build_model(small_backbone(kind), 2, cmvn, feature_config=CFG, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for bn in m._bn_list():
        bn.running_mean = (0.2 * rng.standard_normal(bn.running_mean.shape)).astype(np.float32)
        bn.running_var = (1.0 + 0.5 * rng.random(bn.running_var.shape)).astype(np.float32)
    return m


@pytest.mark.parametrize("kind", ["tcn", "dstcn", "gdstcn", "mdtc"])
@pytest.mark.parametrize("chunk_hops", [1, 7, None])
def test_streaming_matches_offline(kind, chunk_hops, cmvn, audio):
    m = randomized_model(kind, cmvn)
    ref = offline_post(m, audio)
    chunk = len(audio) if chunk_hops is None else chunk_hops * CFG.shift_samples
    got, st = stream_post(m, audio, chunk)
    assert got.shape == ref.shape
    assert np.max(np.abs(got - ref)) <= 1e-5
    assert st.remainder.shape[0] < CFG.window_samples


def test_sub_window_chunk_buffers_without_frames(cmvn, audio):
    m = randomized_model("dstcn", cmvn)
    st = make_stream(m)
    st, p, events = push_audio(st, m, audio[:100])
    assert p.shape == (0, 2)
    assert events == []
    assert st.remainder.shape[0] == 100
    st, p, _ = push_audio(st, m, audio[100:1000])
    assert p.shape[0] == CFG.num_frames(1000)


def test_reset_restores_fresh_state(cmvn, audio):
    m = randomized_model("dstcn", cmvn)
    st = make_stream(m)
    push_audio(st, m, audio[:4000])
    reset(st)
    _, a, _ = push_audio(st, m, audio[:3200])
    _, b, _ = push_audio(make_stream(m), m, audio[:3200])
    assert np.array_equal(a, b)
    reset(st)
    reset(st)  # idempotent


def test_sample_rate_mismatch_rejected(cmvn, audio):
    m = randomized_model("dstcn", cmvn)
    with pytest.raises(SampleRateMismatch):
        push_audio(make_stream(m), m, AudioClip(audio[:1000], 8000))


class TestDetectSemantics:
    def _state(self, thresholds, refractory=30):
        return StreamState(contexts=[], channels=1, num_keywords=len(thresholds),
                           sample_rate=16000, thresholds=np.asarray(thresholds),
                           refractory_frames=refractory)

    def test_threshold_crossing_fires_once(self):
        st = self._state([0.9])
        post = np.array([[0.1], [0.2], [0.95], [0.97], [0.3]], dtype=np.float32)
        events = _detect(st, post, 10.0, 25.0)
        assert len(events) == 1
        ev = events[0]
        assert ev.keyword == 0
        assert ev.frame == 2
        assert abs(ev.time_ms - (2 * 10.0 + 25.0)) < 1e-9
        assert abs(ev.score - 0.95) < 1e-6

    def test_refractory_window_suppresses_and_expires(self):
        st = self._state([0.9])
        first = np.array([[0.1], [0.2], [0.95], [0.97], [0.3]], dtype=np.float32)
        assert [e.frame for e in _detect(st, first, 10.0, 25.0)] == [2]
        st.frames_emitted += 5
        # the frame-2 event suppresses crossings until global frame 2+30
        post = np.zeros((40, 1), dtype=np.float32)
        post[26] = 0.95  # global frame 31: suppressed
        post[27] = 0.99  # global frame 32: fires
        events = _detect(st, post, 10.0, 25.0)
        assert [e.frame for e in events] == [32]

    def test_keywords_have_independent_refractory(self):
        st = self._state([0.5, 0.5], refractory=10)
        post = np.zeros((3, 2), dtype=np.float32)
        post[0, 0] = 0.9
        post[1, 1] = 0.9
        events = _detect(st, post, 10.0, 25.0)
        assert [(e.keyword, e.frame) for e in events] == [(0, 0), (1, 1)]


class TestQuantization:
    def test_symmetric_quantize_examples(self):
        qt = symmetric_quantize(np.array([-1.0, 0.5, 1.27]))
        assert abs(qt.scale - 0.01) < 1e-8
        assert qt.q.tolist() == [-100, 50, 127]

    def test_all_zero_tensor(self):
        z = symmetric_quantize(np.zeros(4))
        assert z.scale == 1.0
        assert (z.q == 0).all()

    def test_dequantize_error_bound(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(200)
        qt = symmetric_quantize(w)
        assert np.max(np.abs(qt.dequantize() - w)) <= qt.scale / 2 + 1e-9

    def test_quantize_requires_folded_model(self, cmvn):
        m = randomized_model("dstcn", cmvn)
        with pytest.raises(InvalidConfig):
            quantize(m)

    def test_int8_close_to_float(self, cmvn, audio):
        m = randomized_model("dstcn", cmvn)
        folded = fold_inference(m)
        qm = quantize(folded)
        ref = offline_post(folded, audio)
        got, _ = stream_post(qm, audio, 7 * CFG.shift_samples, fn=push_audio_int8)
        assert np.max(np.abs(got - ref)) <= 0.05

    def test_int8_chunking_is_bitwise_stable(self, cmvn, audio):
        qm = quantize(fold_inference(randomized_model("dstcn", cmvn)))
        a, _ = stream_post(qm, audio[:32000], CFG.shift_samples, fn=push_audio_int8)
        b, _ = stream_post(qm, audio[:32000], 32000, fn=push_audio_int8)
        assert np.array_equal(a, b)

    def test_exactly_representable_weights_match_float(self, cmvn, audio):
        # when every weight sits on the int8 grid the two engines agree
        # to float32 rounding noise
        rng = np.random.default_rng(2)
        stats = CmvnStats(mean=np.zeros(D), inv_stddev=np.ones(D), frame_count=10)
        m = build_model(
            BackboneConfig(kind="tcn", hidden_channels=8, kernel_size=2, num_layers=1),
            1, stats, feature_config=CFG, seed=1, _folded=True)
        for p in m.parameters():
            if p.name.endswith(".w"):
                p.tensor.data = (
                    rng.integers(-127, 128, p.value.shape).astype(np.float32) * 0.01
                )
            else:
                p.tensor.data = np.zeros_like(p.value)
        qm = quantize(m)
        r_f, _ = stream_post(m, audio[:16000], 16000)
        r_q, _ = stream_post(qm, audio[:16000], 16000, fn=push_audio_int8)
        assert np.max(np.abs(r_f - r_q)) <= 2e-6

    def test_quantized_container_round_trip(self, tmp_path, cmvn, audio):
        qm = quantize(fold_inference(randomized_model("gdstcn", cmvn)))
        p1, p2 = tmp_path / "q1.kws", tmp_path / "q2.kws"
        save_quantized(qm, str(p1))
        qm2 = load_quantized(str(p1))
        save_quantized(qm2, str(p2))
        assert p1.read_bytes() == p2.read_bytes()
        a, _ = stream_post(qm2, audio[:16000], 999, fn=push_audio_int8)
        b, _ = stream_post(qm, audio[:16000], 999, fn=push_audio_int8)
        assert np.array_equal(a, b)
