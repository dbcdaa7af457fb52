"""Epoch-driven training loop with per-epoch checkpoints and model averaging.

Every source of randomness is derived from (seed, epoch) through a
SeedSequence, never from a stateful global generator.  That makes the rng
state stored in a checkpoint just those two integers, so resuming from
epoch e reproduces the uninterrupted run bit for bit, and two full runs
with the same seed and thread count write identical checkpoint bytes.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .container import load_checkpoint, save_checkpoint
from .dataio import Batch, ManifestEntry, PipelineConfig, make_batch
from .errors import (
    EmptyManifest,
    InvalidConfig,
    NoCheckpoints,
    NonFiniteGradient,
    NonFiniteValue,
)
from .features import SpecAugmentPolicy
from .losses import LossConfig, compute_loss
from .models import KwsModel, forward_tensor

LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 777
    average_top_n: int = 30
    checkpoint_dir: str = "checkpoints"
    augment: bool = True
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    masks: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    num_workers: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.average_top_n < 1:
            raise InvalidConfig("average_top_n must be >= 1")
        if self.lr < 0 or self.grad_clip <= 0:
            raise InvalidConfig("lr must be >= 0 and grad_clip > 0")


def _epoch_seed(seed: int, epoch: int) -> int:
    # one derived integer per epoch; feeds the per-utterance mixing in dataio
    return int(np.random.SeedSequence((seed, epoch)).generate_state(1, np.uint64)[0])


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch, 1))))


def _checkpoint_path(ckpt_dir: str, epoch: int) -> str:
    return os.path.join(ckpt_dir, f"epoch_{epoch:04d}.kws")


def list_checkpoints(ckpt_dir: str) -> list[str]:
    if not os.path.isdir(ckpt_dir):
        return []
    names = [
        n
        for n in os.listdir(ckpt_dir)
        if n.startswith("epoch_") and n.endswith(".kws")
    ]
    return [os.path.join(ckpt_dir, n) for n in sorted(names)]


def evaluate_dev(
    model: KwsModel,
    dev_entries: list[ManifestEntry],
    loss_cfg: LossConfig,
    *,
    batch_size: int = 128,
    epoch: int | None = None,
) -> float:
    """Mean loss over the dev set: no augmentation, no statistics updates."""
    if not dev_entries:
        raise EmptyManifest("dev manifest has no entries")
    pipeline = PipelineConfig(features=model.feature_config, augment=False)
    eff_epoch = (1 << 30) if epoch is None else epoch
    total = 0.0
    count = 0
    with nn.no_grad():
        for lo in range(0, len(dev_entries), batch_size):
            chunk = dev_entries[lo : lo + batch_size]
            batch = make_batch(chunk, pipeline, seed=0)
            post = forward_tensor(model, batch.features, batch.lengths, train=False)
            res = compute_loss(
                post, batch.labels, batch.lengths, batch.end_frames, loss_cfg, eff_epoch
            )
            total += float(np.sum(res.per_utterance, dtype=np.float64))
            count += batch.size
    return total / count


def _train_one_epoch(
    model: KwsModel,
    entries: list[ManifestEntry],
    states: dict,
    cfg: TrainConfig,
    epoch: int,
    pipeline: PipelineConfig,
) -> float:
    order = _epoch_rng(cfg.seed, epoch).permutation(len(entries))
    params = model.trainable_parameters()
    seed = _epoch_seed(cfg.seed, epoch)
    total = 0.0
    count = 0
    for lo in range(0, len(entries), cfg.batch_size):
        chunk = [entries[i] for i in order[lo : lo + cfg.batch_size]]
        batch = make_batch(chunk, pipeline, seed=seed, num_workers=cfg.num_workers)
        post = forward_tensor(model, batch.features, batch.lengths, train=True)
        res = compute_loss(
            post, batch.labels, batch.lengths, batch.end_frames, cfg.loss, epoch
        )
        loss_val = float(res.value.data)
        if not np.isfinite(loss_val):
            raise NonFiniteValue(
                f"epoch {epoch}: non-finite loss on batch {list(batch.keys)[:4]}"
            )
        model.zero_grad()
        res.value.backward()
        nn.clip_global_norm(params, cfg.grad_clip)
        try:
            for p in params:
                nn.adam_step(p, states[p.name])
        except NonFiniteGradient as e:
            raise NonFiniteGradient(
                f"epoch {epoch}: {e} on batch {list(batch.keys)[:4]}"
            ) from e
        total += float(np.sum(res.per_utterance, dtype=np.float64))
        count += batch.size
    return total / max(count, 1)


def train(
    model: KwsModel,
    train_entries: list[ManifestEntry],
    dev_entries: list[ManifestEntry],
    cfg: TrainConfig,
    *,
    resume: bool = False,
    log_fn=None,
) -> list[dict]:
    """Runs the epoch loop; writes one checkpoint per epoch plus a JSONL log.

    With resume=True a partially filled checkpoint_dir continues from its
    last epoch and the continuation is identical to the uninterrupted run.
    Returns the log records written by this call.
    """
    if not train_entries:
        raise EmptyManifest("training manifest has no entries")
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    params = model.trainable_parameters()
    states = {
        p.name: nn.init_adam(
            p,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        for p in params
    }
    start_epoch = 1
    if resume:
        have = list_checkpoints(cfg.checkpoint_dir)
        if have:
            ck_model, adam, meta = load_checkpoint(have[-1])
            if meta["backbone"] != model.backbone_cfg.to_dict():
                raise InvalidConfig(
                    f"{have[-1]}: checkpoint backbone differs from the configured model"
                )
            for src, dst in zip(ck_model.parameters(), model.parameters()):
                dst.value = src.value
            for sb, db in zip(ck_model._bn_list(), model._bn_list()):
                db.running_mean = sb.running_mean.copy()
                db.running_var = sb.running_var.copy()
            if adam:
                states.update(adam)
            start_epoch = int(meta["epoch"]) + 1

    pipeline = PipelineConfig(
        features=model.feature_config,
        speed_factors=cfg.speed_factors,
        augment=cfg.augment,
        masks=cfg.masks,
    )
    log_path = os.path.join(cfg.checkpoint_dir, LOG_NAME)
    records = []
    mode = "a" if (resume and start_epoch > 1) else "w"
    with open(log_path, mode) as log:
        for epoch in range(start_epoch, cfg.epochs + 1):
            t0 = time.monotonic()
            train_loss = _train_one_epoch(model, train_entries, states, cfg, epoch, pipeline)
            dev_loss = evaluate_dev(
                model, dev_entries, cfg.loss, batch_size=cfg.batch_size, epoch=epoch
            )
            seconds = time.monotonic() - t0
            model.meta["rng"] = {"seed": cfg.seed, "next_epoch": epoch + 1}
            save_checkpoint(
                model,
                _checkpoint_path(cfg.checkpoint_dir, epoch),
                epoch=epoch,
                dev_metric=dev_loss,
                adam=states,
            )
            # the log file is a pure function of data, config, and seed so
            # reruns can be diffed byte for byte; measured wall time is
            # diagnostics and only goes to the callback (the CLI prints it)
            rec = {
                "epoch": epoch,
                "train_loss": train_loss,
                "dev_loss": dev_loss,
                "seconds": 0.0,
            }
            records.append(rec)
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            if log_fn is not None:
                log_fn({**rec, "seconds": round(seconds, 3)})
    return records


def average_checkpoints(ckpt_dir: str, top_n: int = 30) -> KwsModel:
    """Elementwise mean of the top_n checkpoints by dev metric.

    Fewer than top_n checkpoints averages all of them with a warning.  The
    selected set is stacked in epoch order, so the result is independent of
    directory listing order; running statistics are averaged the same way.
    """
    paths = list_checkpoints(ckpt_dir)
    if not paths:
        raise NoCheckpoints(f"no checkpoints under {ckpt_dir!r}")
    loaded = []
    for p in paths:
        mdl, _, meta = load_checkpoint(p)
        loaded.append((float(meta["dev_metric"]), int(meta["epoch"]), mdl))
    if len(loaded) < top_n:
        warnings.warn(
            f"only {len(loaded)} checkpoints available, averaging all of them",
            stacklevel=2,
        )
    picked = sorted(loaded, key=lambda x: (x[0], x[1]))[:top_n]
    picked.sort(key=lambda x: x[1])  # canonical stacking order
    models = [m for _, _, m in picked]
    out = models[0].copy()
    for dst, group in zip(out.parameters(), zip(*(m.parameters() for m in models))):
        dst.value = np.mean(np.stack([p.value for p in group]), axis=0)
    for dst_bn, group in zip(out._bn_list(), zip(*(m._bn_list() for m in models))):
        dst_bn.running_mean = np.mean(np.stack([b.running_mean for b in group]), axis=0)
        dst_bn.running_var = np.mean(np.stack([b.running_var for b in group]), axis=0)
    out.meta = dict(models[-1].meta)
    out.meta.pop("rng", None)
    out.meta["averaged_from"] = [e for _, e, _ in picked]
    return out


def overfit_batch(model: KwsModel, batch: Batch, cfg: TrainConfig, steps: int) -> float:
    """Repeated updates on one fixed batch; returns the final loss.

    A trainability probe, not a training mode: if this cannot push the loss
    near zero something is broken upstream of the data.
    """
    params = model.trainable_parameters()
    states = {
        p.name: nn.init_adam(
            p,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        for p in params
    }
    loss_val = float("inf")
    for _ in range(steps):
        post = forward_tensor(model, batch.features, batch.lengths, train=True)
        res = compute_loss(post, batch.labels, batch.lengths, batch.end_frames, cfg.loss, 1)
        model.zero_grad()
        res.value.backward()
        nn.clip_global_norm(params, cfg.grad_clip)
        for p in params:
            nn.adam_step(p, states[p.name])
        loss_val = float(res.value.data)
    return loss_val
