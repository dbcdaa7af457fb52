"""JSON run configuration.

One document describes a whole training run: feature geometry, backbone,
objective, and optimizer schedule, plus optional keyword names.  Every
section is optional and falls back to module defaults, but unknown keys
are hard errors at every nesting level; a silently ignored typo is how
two "identical" runs end up different.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import InvalidConfig
from .features import FeatureConfig, SpecAugmentPolicy
from .losses import LossConfig, estimate_min_duration
from .models import BackboneConfig
from .trainer import TrainConfig

_SECTIONS = ("features", "backbone", "loss", "train", "keywords")


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig("dstcn"))
    train: TrainConfig = field(default_factory=TrainConfig)
    keywords: tuple[str, ...] | None = None
    min_duration_auto: bool = False  # loss.min_duration_frames was "auto"

    def to_dict(self) -> dict:
        loss = self.train.loss.to_dict()
        if self.min_duration_auto:
            loss["min_duration_frames"] = "auto"
        train = {
            "epochs": self.train.epochs,
            "batch_size": self.train.batch_size,
            "lr": self.train.lr,
            "beta1": self.train.beta1,
            "beta2": self.train.beta2,
            "eps": self.train.eps,
            "weight_decay": self.train.weight_decay,
            "grad_clip": self.train.grad_clip,
            "seed": self.train.seed,
            "average_top_n": self.train.average_top_n,
            "checkpoint_dir": self.train.checkpoint_dir,
            "augment": self.train.augment,
            "speed_factors": list(self.train.speed_factors),
            "masks": {
                "num_time_masks": self.train.masks.num_time_masks,
                "time_mask_max": self.train.masks.time_mask_max,
                "num_freq_masks": self.train.masks.num_freq_masks,
                "freq_mask_max": self.train.masks.freq_mask_max,
            },
            "num_workers": self.train.num_workers,
        }
        return {
            "features": self.features.to_dict(),
            "backbone": self.backbone.to_dict(),
            "loss": loss,
            "train": train,
            "keywords": None if self.keywords is None else list(self.keywords),
        }


def _reject_unknown(section: str, given: dict, allowed: tuple[str, ...]) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise InvalidConfig(f"unknown key(s) in {section!r}: {', '.join(extra)}")


def _as_mapping(section: str, value) -> dict:
    if not isinstance(value, dict):
        raise InvalidConfig(f"section {section!r} must be a JSON object")
    return value


def _parse_features(d: dict) -> FeatureConfig:
    allowed = tuple(FeatureConfig().to_dict())
    _reject_unknown("features", d, allowed)
    return FeatureConfig(**d)


def _parse_backbone(d: dict) -> BackboneConfig:
    allowed = tuple(BackboneConfig("tcn").to_dict())
    _reject_unknown("backbone", d, allowed)
    d = dict(d)
    if "dilations" in d and d["dilations"] is not None:
        d["dilations"] = tuple(int(v) for v in d["dilations"])
    if "kind" not in d:
        d["kind"] = "dstcn"
    return BackboneConfig(**d)


def _parse_loss(d: dict) -> tuple[LossConfig, bool]:
    allowed = tuple(LossConfig().to_dict())
    _reject_unknown("loss", d, allowed)
    d = dict(d)
    auto = d.get("min_duration_frames") == "auto"
    if auto:
        d["min_duration_frames"] = 0
    return LossConfig(**d), auto


def _parse_masks(d: dict) -> SpecAugmentPolicy:
    allowed = ("num_time_masks", "time_mask_max", "num_freq_masks", "freq_mask_max")
    _reject_unknown("train.masks", d, allowed)
    return SpecAugmentPolicy(**d)


def _parse_train(d: dict, loss: LossConfig) -> TrainConfig:
    allowed = (
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "grad_clip",
        "seed",
        "average_top_n",
        "checkpoint_dir",
        "augment",
        "speed_factors",
        "masks",
        "num_workers",
    )
    _reject_unknown("train", d, allowed)
    d = dict(d)
    if "speed_factors" in d:
        d["speed_factors"] = tuple(float(v) for v in d["speed_factors"])
    if "masks" in d:
        d["masks"] = _parse_masks(_as_mapping("train.masks", d["masks"]))
    return TrainConfig(loss=loss, **d)


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("run config must be a JSON object")
    _reject_unknown("run config", doc, _SECTIONS)
    features = _parse_features(_as_mapping("features", doc.get("features", {})))
    backbone = _parse_backbone(_as_mapping("backbone", doc.get("backbone", {})))
    loss, auto = _parse_loss(_as_mapping("loss", doc.get("loss", {})))
    train = _parse_train(_as_mapping("train", doc.get("train", {})), loss)
    keywords = doc.get("keywords")
    if keywords is not None:
        if not isinstance(keywords, list) or not all(
            isinstance(k, str) and k for k in keywords
        ):
            raise InvalidConfig("keywords must be a list of non-empty strings")
        if len(set(keywords)) != len(keywords):
            raise InvalidConfig("keyword names must be unique")
        keywords = tuple(keywords)
    return RunConfig(
        features=features,
        backbone=backbone,
        train=train,
        keywords=keywords,
        min_duration_auto=auto,
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InvalidConfig(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path} is not valid JSON: {e}") from e
    return parse_run_config(doc)


def resolve_min_duration(cfg: RunConfig, train_entries) -> RunConfig:
    """Replace an "auto" minimum duration with the estimate from the data."""
    if not cfg.min_duration_auto:
        return cfg
    m = estimate_min_duration(train_entries, cfg.features)
    loss = replace(cfg.train.loss, min_duration_frames=m)
    return replace(
        cfg, train=replace(cfg.train, loss=loss), min_duration_auto=False
    )
