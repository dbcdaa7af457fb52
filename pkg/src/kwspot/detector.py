"""Frame-synchronous streaming detection in float32 or int8.

A stream owns one small cache per convolution unit holding that unit's
last (K-1)*dilation input frames, plus a remainder buffer of raw samples
shorter than one analysis window.  Caches start at zero, which is exactly
the left zero-padding the offline forward applies, so a streamed prefix
and an offline pass see identical arithmetic up to float accumulation
order.  Memory is constant in stream length.

The int8 engine quantizes weights per tensor (symmetric, zero-point 0)
and activations per frame on the fly.  Within one tap the products are
integers carried exactly, so accumulation is lossless; taps are combined
in float because each input frame carries its own activation scale.
Activations, residuals and the sigmoid stay in float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import QuantizedTensor, load_container, save_container
from .dataio import AudioClip
from .errors import InvalidConfig, MalformedContainer, SampleRateMismatch
from .features import fbank
from .models import (
    POSTERIOR_CLAMP_HI,
    POSTERIOR_CLAMP_LO,
    KwsModel,
    build_model,
)

DEFAULT_REFRACTORY_MS = 1000.0


@dataclass(frozen=True)
class Detection:
    keyword: int
    frame: int  # global emission frame index, 0-based
    time_ms: float  # end of the analysis window for that frame
    score: float


# ---------------------------------------------------------------------------
# quantized model


@dataclass
class QuantUnit:
    qw: QuantizedTensor  # [K, cpg, cout]
    bias: np.ndarray  # [cout] float32
    dilation: int
    groups: int
    act: str

    @property
    def context(self) -> int:
        return (self.qw.q.shape[0] - 1) * self.dilation


@dataclass
class QuantBlock:
    units: list[QuantUnit]
    residual: bool


class QuantizedModel:
    """Same topology as KwsModel, int8 weights, float biases."""

    def __init__(self, skeleton: KwsModel, get):
        if not skeleton.folded:
            raise InvalidConfig("quantization requires a folded model (fold_inference first)")
        self.backbone_cfg = skeleton.backbone_cfg
        self.num_keywords = skeleton.num_keywords
        self.cmvn = skeleton.cmvn
        self.feature_config = skeleton.feature_config
        self.keywords = list(skeleton.keywords)
        self.thresholds = list(skeleton.thresholds)
        self.meta = dict(skeleton.meta)
        self.proj_w = _as_quant(get("proj.w"))
        self.proj_b = _as_float(get("proj.b"))
        self.tap_blocks = skeleton.tap_blocks
        self.blocks = []
        for bi, block in enumerate(skeleton.blocks):
            units = []
            for ui, u in enumerate(block.units):
                prefix = f"blk{bi:02d}.u{ui}"
                units.append(
                    QuantUnit(
                        qw=_as_quant(get(f"{prefix}.w")),
                        bias=_as_float(get(f"{prefix}.b")),
                        dilation=u.dilation,
                        groups=u.groups,
                        act=u.act,
                    )
                )
            self.blocks.append(QuantBlock(units=units, residual=block.residual))
        self.heads = [
            (_as_quant(get(f"head{i}.w")), _as_float(get(f"head{i}.b")))
            for i in range(skeleton.num_keywords)
        ]

    def unit_contexts(self) -> list[int]:
        return [u.context for block in self.blocks for u in block.units]

    @property
    def receptive_field(self) -> int:
        return 1 + sum(self.unit_contexts())


def _as_quant(v) -> QuantizedTensor:
    if not isinstance(v, QuantizedTensor):
        raise MalformedContainer("expected an int8 tensor with scale")
    return v


def _as_float(v) -> np.ndarray:
    if isinstance(v, QuantizedTensor):
        raise MalformedContainer("expected a float tensor")
    return np.asarray(v, dtype=np.float32)


def symmetric_quantize(w: np.ndarray) -> QuantizedTensor:
    """scale = max|w|/127, q = clamp(round(w/scale)); all-zero gets scale 1.

    The scale is rounded to float32 up front because the container stores it
    as float32; quantize-then-save and save-then-load then agree exactly.
    """
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(peak / 127.0)) if peak > 0.0 else 1.0
    q = np.clip(np.round(np.asarray(w, dtype=np.float64) / scale), -127, 127)
    return QuantizedTensor(q=q.astype(np.int8), scale=scale)


def quantize(model: KwsModel) -> QuantizedModel:
    if not model.folded:
        raise InvalidConfig("quantization requires a folded model (fold_inference first)")
    values = {p.name: p.value for p in model.parameters()}

    def get(name: str):
        v = values[name]
        if name.endswith(".w"):
            return symmetric_quantize(v)
        return v

    return QuantizedModel(model, get)


def save_quantized(qmodel: QuantizedModel, path: str) -> None:
    tensors: dict = {"proj.w": qmodel.proj_w, "proj.b": qmodel.proj_b}
    for bi, block in enumerate(qmodel.blocks):
        for ui, u in enumerate(block.units):
            prefix = f"blk{bi:02d}.u{ui}"
            tensors[f"{prefix}.w"] = u.qw
            tensors[f"{prefix}.b"] = u.bias
    for i, (w, b) in enumerate(qmodel.heads):
        tensors[f"head{i}.w"] = w
        tensors[f"head{i}.b"] = b
    meta = {
        "kind": "model",
        "backbone": qmodel.backbone_cfg.to_dict(),
        "feature_config": qmodel.feature_config.to_dict(),
        "cmvn": _cmvn_dict(qmodel.cmvn),
        "num_keywords": qmodel.num_keywords,
        "keywords": list(qmodel.keywords),
        "thresholds": [float(t) for t in qmodel.thresholds],
        "folded": True,
        "quantized": True,
        "provenance": dict(qmodel.meta),
    }
    save_container(path, meta, tensors)


def _cmvn_dict(stats) -> dict:
    return {
        "mean": [float(v) for v in stats.mean],
        "inv_stddev": [float(v) for v in stats.inv_stddev],
        "frame_count": int(stats.frame_count),
    }


def load_quantized(path: str) -> QuantizedModel:
    from .container import _cmvn_from_dict  # shared parsing
    from .features import FeatureConfig
    from .models import BackboneConfig

    metadata, tensors = load_container(path)
    if not metadata.get("quantized"):
        raise MalformedContainer(f"{path}: not an int8 container")
    skeleton = build_model(
        BackboneConfig.from_dict(metadata["backbone"]),
        int(metadata["num_keywords"]),
        _cmvn_from_dict(metadata["cmvn"]),
        feature_config=FeatureConfig.from_dict(metadata["feature_config"]),
        seed=0,
        _folded=True,
    )
    skeleton.meta = dict(metadata.get("provenance", {}))
    skeleton.meta["folded"] = True
    skeleton.keywords = [str(k) for k in metadata["keywords"]]
    skeleton.thresholds = [float(t) for t in metadata["thresholds"]]

    def get(name: str):
        if name not in tensors:
            raise MalformedContainer(f"{path}: missing tensor {name!r}")
        return tensors[name]

    return QuantizedModel(skeleton, get)


# ---------------------------------------------------------------------------
# stream state


class StreamState:
    def __init__(self, contexts: list[int], channels: int, num_keywords: int,
                 sample_rate: int, thresholds: np.ndarray, refractory_frames: int):
        self.caches = [
            np.zeros((ctx, channels), dtype=np.float32) if ctx > 0 else None
            for ctx in contexts
        ]
        self.remainder = np.zeros(0, dtype=np.float64)
        self.frames_emitted = 0
        self.refractory_until = np.zeros(num_keywords, dtype=np.int64)
        self.thresholds = thresholds
        self.refractory_frames = refractory_frames
        self.sample_rate = sample_rate


def make_stream(model, thresholds=None, refractory_ms: float = DEFAULT_REFRACTORY_MS) -> StreamState:
    """Fresh zeroed state for one audio stream over a (float or int8) model."""
    k = model.num_keywords
    if thresholds is None:
        thr = np.asarray(model.thresholds, dtype=np.float64)
    else:
        thr = np.asarray(thresholds, dtype=np.float64)
        if thr.shape != (k,):
            raise InvalidConfig(f"need {k} thresholds, got shape {thr.shape}")
    fcfg = model.feature_config
    refractory = max(1, int(round(refractory_ms / fcfg.shift_ms)))
    return StreamState(
        contexts=model.unit_contexts(),
        channels=model.backbone_cfg.hidden_channels,
        num_keywords=k,
        sample_rate=fcfg.sample_rate,
        thresholds=thr,
        refractory_frames=refractory,
    )


def reset(state: StreamState) -> StreamState:
    for c in state.caches:
        if c is not None:
            c[...] = 0.0
    state.remainder = np.zeros(0, dtype=np.float64)
    state.frames_emitted = 0
    state.refractory_until[...] = 0
    return state


# ---------------------------------------------------------------------------
# float engine


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _conv_unit_float(u, xin: np.ndarray, f: int) -> np.ndarray:
    """xin is [ctx+F, Cin]; returns [F, Cout] pre-activation conv output."""
    w = u.w.value
    k, cpg, cout = w.shape
    d = u.dilation
    cin = xin.shape[1]
    if u.groups == 1:
        out = xin[0:f] @ w[0] if k > 0 else None
        for j in range(1, k):
            out = out + xin[j * d : j * d + f] @ w[j]
    elif u.groups == cin and cpg == 1:
        out = xin[0:f] * w[0, 0]
        for j in range(1, k):
            out = out + xin[j * d : j * d + f] * w[j, 0]
    else:
        g = u.groups
        opg = cout // g
        xg = xin.reshape(xin.shape[0], g, cpg)
        wg = w.reshape(k, cpg, g, opg).transpose(0, 2, 1, 3)  # [K, g, cpg, opg]
        out = np.zeros((f, cout), dtype=np.float32)
        for j in range(k):
            seg = xg[j * d : j * d + f].transpose(1, 0, 2)  # [g, F, cpg]
            mixed = np.matmul(seg, wg[j])  # [g, F, opg]
            out += mixed.transpose(1, 0, 2).reshape(f, cout)
    return out


def _apply_unit_float(u, xin: np.ndarray, f: int) -> np.ndarray:
    h = _conv_unit_float(u, xin, f)
    if u.bias is not None:
        h = h + u.bias.value
    if u.bn is not None:
        istd = 1.0 / np.sqrt(u.bn.running_var + u.bn.eps)
        scale = (u.bn.gamma.value * istd).astype(np.float32)
        shift = (u.bn.beta.value - u.bn.running_mean * u.bn.gamma.value * istd).astype(
            np.float32
        )
        h = h * scale + shift
    if u.act == "relu":
        h = np.maximum(h, 0.0)
    return h.astype(np.float32, copy=False)


def _project_float(model: KwsModel, feats: np.ndarray) -> np.ndarray:
    x = (feats - model.cmvn.mean.astype(np.float32)) * model.cmvn.inv_stddev.astype(
        np.float32
    )
    return x @ model.proj_w.value + model.proj_b.value


def _heads_float(model: KwsModel, h: np.ndarray) -> np.ndarray:
    logits = [h @ w.value + b.value for w, b in model.heads]
    return np.concatenate(logits, axis=1)


# ---------------------------------------------------------------------------
# int8 engine


def _dyn_quant_rows(x: np.ndarray):
    """Per-frame symmetric activation quantization; returns (q as f64, scales)."""
    a = np.abs(x).max(axis=1) / 127.0
    safe = np.where(a > 0.0, a, 1.0)
    q = np.round(x / safe[:, None]).astype(np.float64)
    return q, safe.astype(np.float64)


def _matmul_int8(x: np.ndarray, qt: QuantizedTensor, bias: np.ndarray) -> np.ndarray:
    """Single-tap [N, Cin] x [Cin, Cout] with dynamic activation quantization."""
    qx, a = _dyn_quant_rows(x)
    acc = qx @ qt.q.astype(np.float64)  # exact: integer values well below 2^53
    out = acc * (a[:, None] * qt.scale)
    return (out + bias).astype(np.float32)


def _apply_unit_int8(u: QuantUnit, xin: np.ndarray, f: int) -> np.ndarray:
    k, cpg, cout = u.qw.q.shape
    d = u.dilation
    cin = xin.shape[1]
    qx, a = _dyn_quant_rows(xin)
    qw = u.qw.q.astype(np.float64)
    acc = np.zeros((f, cout), dtype=np.float64)
    if u.groups == 1:
        for j in range(k):
            sl = slice(j * d, j * d + f)
            acc += (qx[sl] @ qw[j]) * (a[sl, None] * u.qw.scale)
    elif u.groups == cin and cpg == 1:
        for j in range(k):
            sl = slice(j * d, j * d + f)
            acc += (qx[sl] * qw[j, 0]) * (a[sl, None] * u.qw.scale)
    else:
        g = u.groups
        opg = cout // g
        qxg = qx.reshape(qx.shape[0], g, cpg)
        qwg = qw.reshape(k, cpg, g, opg).transpose(0, 2, 1, 3)  # [K, g, cpg, opg]
        for j in range(k):
            seg = qxg[j * d : j * d + f].transpose(1, 0, 2)  # [g, F, cpg]
            mixed = np.matmul(seg, qwg[j]).transpose(1, 0, 2).reshape(f, cout)
            acc += mixed * (a[j * d : j * d + f, None] * u.qw.scale)
    h = (acc + u.bias).astype(np.float32)
    if u.act == "relu":
        h = np.maximum(h, 0.0)
    return h


def _project_int8(qmodel: QuantizedModel, feats: np.ndarray) -> np.ndarray:
    x = (feats - qmodel.cmvn.mean.astype(np.float32)) * qmodel.cmvn.inv_stddev.astype(
        np.float32
    )
    return _matmul_int8(x, qmodel.proj_w, qmodel.proj_b)


def _heads_int8(qmodel: QuantizedModel, h: np.ndarray) -> np.ndarray:
    logits = [_matmul_int8(h, w, b) for w, b in qmodel.heads]
    return np.concatenate(logits, axis=1)


# ---------------------------------------------------------------------------
# the shared streaming step


def _coerce_samples(state: StreamState, samples) -> np.ndarray:
    if isinstance(samples, AudioClip):
        if samples.sample_rate != state.sample_rate:
            raise SampleRateMismatch(
                f"stream expects {state.sample_rate} Hz, clip is {samples.sample_rate} Hz"
            )
        return np.asarray(samples.samples, dtype=np.float64)
    return np.asarray(samples, dtype=np.float64).reshape(-1)


def _emit_frames(state: StreamState, model, samples) -> np.ndarray:
    """Consume samples, return the newly completed log-mel frames [F, D]."""
    fcfg = model.feature_config
    buf = np.concatenate([state.remainder, _coerce_samples(state, samples)])
    win, hop = fcfg.window_samples, fcfg.shift_samples
    if buf.shape[0] < win:
        state.remainder = buf
        return np.zeros((0, fcfg.num_mels), dtype=np.float32)
    feats = fbank(AudioClip(samples=buf, sample_rate=fcfg.sample_rate), fcfg).values
    state.remainder = buf[feats.shape[0] * hop :]
    return feats


def _run_backbone(model, state: StreamState, h: np.ndarray, unit_fn) -> np.ndarray:
    f = h.shape[0]
    taps = []
    tap_set = set(model.tap_blocks or [])
    ci = 0
    for bi, block in enumerate(model.blocks):
        inp = h
        for u in block.units:
            cache = state.caches[ci]
            if cache is not None:
                xin = np.concatenate([cache, h], axis=0)
                state.caches[ci] = xin[f:].copy()
            else:
                xin = h
            h = unit_fn(u, xin, f)
            ci += 1
        if block.residual:
            h = h + inp
        if bi in tap_set:
            taps.append(h)
    if model.tap_blocks is not None:
        out = taps[0]
        for tap in taps[1:]:
            out = out + tap
        return out
    return h


def _detect(state: StreamState, post: np.ndarray, shift_ms: float, window_ms: float):
    events = []
    for f in range(post.shape[0]):
        gt = state.frames_emitted + f
        for k in range(post.shape[1]):
            if post[f, k] >= state.thresholds[k] and gt >= state.refractory_until[k]:
                events.append(
                    Detection(
                        keyword=k,
                        frame=gt,
                        time_ms=gt * shift_ms + window_ms,
                        score=float(post[f, k]),
                    )
                )
                state.refractory_until[k] = gt + state.refractory_frames
    return events


def _push(state: StreamState, model, samples, project, unit_fn, heads):
    feats = _emit_frames(state, model, samples)
    if feats.shape[0] == 0:
        return state, np.zeros((0, model.num_keywords), dtype=np.float32), []
    h = project(model, feats).astype(np.float32, copy=False)
    h = _run_backbone(model, state, h, unit_fn)
    logits = heads(model, h)
    post = np.clip(_sigmoid(logits), POSTERIOR_CLAMP_LO, POSTERIOR_CLAMP_HI).astype(
        np.float32
    )
    fcfg = model.feature_config
    events = _detect(state, post, fcfg.shift_ms, fcfg.window_ms)
    state.frames_emitted += post.shape[0]
    return state, post, events


def push_audio(state: StreamState, model: KwsModel, samples):
    """Feed samples; returns (state, new posterior frames [F, K], detections)."""
    return _push(state, model, samples, _project_float, _apply_unit_float, _heads_float)


def push_audio_int8(state: StreamState, qmodel: QuantizedModel, samples):
    """int8-weight variant of push_audio with the same contract."""
    return _push(state, qmodel, samples, _project_int8, _apply_unit_int8, _heads_int8)
