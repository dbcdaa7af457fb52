"""Single-file binary model container.

Layout, all integers little-endian:

    magic   4 bytes  b"KWSF"
    version u32      currently 1
    mlen    u64      metadata byte length
    meta    mlen bytes of canonical JSON (sorted keys, no whitespace)
    count   u32      number of tensors
    then per tensor, sorted by name:
    nlen    u16      name byte length, then the UTF-8 name
    dtype   u8       0 = float32, 1 = int8
    rank    u8
    dims    rank x u64
    data    raw little-endian elements
    scale   f32      only for int8 tensors

Tensors are written in sorted name order and the JSON encoder is
canonical, so saving what a load returned reproduces the file byte for
byte.  No timestamps or environment details are ever embedded.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

from .errors import MalformedContainer, UnsupportedFormatVersion
from .features import CmvnStats, FeatureConfig
from .models import BackboneConfig, KwsModel, build_model

MAGIC = b"KWSF"
FORMAT_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_I8 = 1


@dataclass(frozen=True)
class QuantizedTensor:
    """Symmetric per-tensor int8 weights: values = q * scale."""

    q: np.ndarray
    scale: float

    def __post_init__(self):
        if self.q.dtype != np.int8:
            raise MalformedContainer("quantized tensor must be int8")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise MalformedContainer("quantization scale must be positive and finite")

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float32) * np.float32(self.scale)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode(
        "utf-8"
    )


def save_container(
    path: str, metadata: dict, tensors: Mapping[str, np.ndarray | QuantizedTensor]
) -> None:
    meta = canonical_json(metadata)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            value = tensors[name]
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise MalformedContainer(f"tensor name too long: {name[:32]}...")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            if isinstance(value, QuantizedTensor):
                arr = np.ascontiguousarray(value.q)
                fh.write(struct.pack("<BB", _DTYPE_I8, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.astype("<i1", copy=False).tobytes())
                fh.write(struct.pack("<f", value.scale))
            else:
                arr = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
                fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise MalformedContainer(f"truncated container while reading {what}")
    return buf


def load_container(path: str) -> tuple[dict, dict[str, np.ndarray | QuantizedTensor]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise MalformedContainer(f"{path}: not a model container (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise UnsupportedFormatVersion(
                f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
            )
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        try:
            metadata = json.loads(_read_exact(fh, mlen, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedContainer(f"{path}: bad metadata block: {e}") from e
        if not isinstance(metadata, dict):
            raise MalformedContainer(f"{path}: metadata must be a JSON object")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray | QuantizedTensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            if name in tensors:
                raise MalformedContainer(f"{path}: duplicate tensor {name!r}")
            dtype, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
            n = 1
            for d in dims:
                n *= d
            if dtype == _DTYPE_F32:
                raw = _read_exact(fh, 4 * n, f"data of {name}")
                tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            elif dtype == _DTYPE_I8:
                raw = _read_exact(fh, n, f"data of {name}")
                (scale,) = struct.unpack("<f", _read_exact(fh, 4, f"scale of {name}"))
                tensors[name] = QuantizedTensor(
                    q=np.frombuffer(raw, dtype="<i1").reshape(dims).copy(), scale=scale
                )
            else:
                raise MalformedContainer(f"{path}: unknown dtype code {dtype} for {name!r}")
        if fh.read(1):
            raise MalformedContainer(f"{path}: trailing bytes after tensor table")
    return metadata, tensors


# ---------------------------------------------------------------------------
# model-level serialization


def _cmvn_to_dict(stats: CmvnStats) -> dict:
    return {
        "mean": [float(v) for v in stats.mean],
        "inv_stddev": [float(v) for v in stats.inv_stddev],
        "frame_count": int(stats.frame_count),
    }


def _cmvn_from_dict(d: dict) -> CmvnStats:
    return CmvnStats(
        mean=np.asarray(d["mean"], dtype=np.float64),
        inv_stddev=np.asarray(d["inv_stddev"], dtype=np.float64),
        frame_count=int(d["frame_count"]),
    )


def model_metadata(model: KwsModel, *, quantized: bool = False) -> dict:
    return {
        "kind": "model",
        "backbone": model.backbone_cfg.to_dict(),
        "feature_config": model.feature_config.to_dict(),
        "cmvn": _cmvn_to_dict(model.cmvn),
        "num_keywords": model.num_keywords,
        "keywords": list(model.keywords),
        "thresholds": [float(t) for t in model.thresholds],
        "folded": model.folded,
        "quantized": bool(quantized),
        "provenance": dict(model.meta),
    }


def model_tensors(model: KwsModel) -> dict[str, np.ndarray]:
    out = {p.name: p.value for p in model.parameters()}
    for name, buf in model.buffers():
        out[name] = buf
    return out


def save_model(model: KwsModel, path: str) -> None:
    save_container(path, model_metadata(model), model_tensors(model))


def _restore_model(metadata: dict, tensors: Mapping[str, np.ndarray]) -> KwsModel:
    cfg = BackboneConfig.from_dict(metadata["backbone"])
    fcfg = FeatureConfig.from_dict(metadata["feature_config"])
    cmvn = _cmvn_from_dict(metadata["cmvn"])
    prov = dict(metadata.get("provenance", {}))
    model = build_model(
        cfg,
        int(metadata["num_keywords"]),
        cmvn,
        feature_config=fcfg,
        seed=int(prov.get("seed", 0)),
        _folded=bool(metadata.get("folded", False)),
    )
    model.meta = prov
    model.keywords = [str(k) for k in metadata["keywords"]]
    model.thresholds = [float(t) for t in metadata["thresholds"]]
    for p in model.parameters():
        if p.name not in tensors:
            raise MalformedContainer(f"missing tensor {p.name!r}")
        arr = tensors[p.name]
        if not isinstance(arr, np.ndarray):
            raise MalformedContainer(f"tensor {p.name!r}: expected float32 weights")
        p.value = arr.astype(np.float32)
    buf_names = set()
    for bi, block in enumerate(model.blocks):
        for ui, u in enumerate(block.units):
            if u.bn is None:
                continue
            prefix = f"blk{bi:02d}.u{ui}.bn"
            for attr, suffix in (("running_mean", "rm"), ("running_var", "rv")):
                name = f"{prefix}.{suffix}"
                buf_names.add(name)
                if name not in tensors:
                    raise MalformedContainer(f"missing tensor {name!r}")
                setattr(u.bn, attr, np.asarray(tensors[name], dtype=np.float32))
    expected = {p.name for p in model.parameters()} | buf_names
    extra = set(tensors) - expected
    if extra:
        raise MalformedContainer(f"unexpected tensors: {sorted(extra)[:4]}")
    return model


def load_model(path: str) -> KwsModel:
    metadata, tensors = load_container(path)
    if metadata.get("kind") not in ("model", "checkpoint"):
        raise MalformedContainer(f"{path}: not a model container (kind={metadata.get('kind')!r})")
    if metadata.get("quantized"):
        raise MalformedContainer(
            f"{path}: holds int8 weights; load it with the detector's quantized loader"
        )
    non_adam = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return _restore_model(metadata, non_adam)


# ---------------------------------------------------------------------------
# checkpoints: a model container plus optimizer slots and bookkeeping


def save_checkpoint(
    model: KwsModel,
    path: str,
    *,
    epoch: int,
    dev_metric: float,
    adam: Mapping[str, object] | None = None,
) -> None:
    metadata = model_metadata(model)
    metadata["kind"] = "checkpoint"
    metadata["epoch"] = int(epoch)
    metadata["dev_metric"] = float(dev_metric)
    tensors = model_tensors(model)
    if adam is not None:
        steps = set()
        hyper = None
        for name, state in adam.items():
            tensors[f"adam.m.{name}"] = state.m
            tensors[f"adam.v.{name}"] = state.v
            steps.add(int(state.step))
            hyper = state
        if hyper is not None:
            metadata["adam"] = {
                "step": max(steps),
                "lr": hyper.lr,
                "beta1": hyper.beta1,
                "beta2": hyper.beta2,
                "eps": hyper.eps,
                "weight_decay": hyper.weight_decay,
            }
    save_container(path, metadata, tensors)


def load_checkpoint(path: str):
    """Returns (model, adam_states_or_None, metadata)."""
    from .nncore import AdamState  # local import keeps module load light

    metadata, tensors = load_container(path)
    if metadata.get("kind") != "checkpoint":
        raise MalformedContainer(f"{path}: not a checkpoint (kind={metadata.get('kind')!r})")
    non_adam = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model = _restore_model(metadata, non_adam)
    adam = None
    if "adam" in metadata:
        h = metadata["adam"]
        adam = {}
        for p in model.trainable_parameters():
            m = tensors.get(f"adam.m.{p.name}")
            v = tensors.get(f"adam.v.{p.name}")
            if m is None or v is None:
                raise MalformedContainer(f"{path}: missing optimizer slots for {p.name!r}")
            adam[p.name] = AdamState(
                m=np.asarray(m, dtype=np.float32),
                v=np.asarray(v, dtype=np.float32),
                step=int(h["step"]),
                lr=float(h["lr"]),
                beta1=float(h["beta1"]),
                beta2=float(h["beta2"]),
                eps=float(h["eps"]),
                weight_decay=float(h["weight_decay"]),
            )
    return model, adam, metadata
