"""Model assembly: CMVN front, linear projection, causal backbone, heads.

Four backbone families are provided.  TCN stacks dense causal convolutions;
DSTCN replaces each with a depthwise + pointwise pair; GDSTCN additionally
groups the pointwise mixing; MDTC runs a preprocessing block followed by
several stacks of depthwise-separable blocks with exponentially growing
dilation and sums the stack outputs, so the classifier sees several
receptive-field scales at once.  Every convolution is strictly causal,
which is what allows streaming inference with bounded per-layer caches.

Each keyword gets its own single-output linear + sigmoid head on the shared
backbone output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nncore as nn
from .errors import DimensionMismatch, InvalidConfig
from .features import CmvnStats, FeatureConfig

POSTERIOR_CLAMP_LO = 1e-8
POSTERIOR_CLAMP_HI = 1.0 - 1e-8

_KINDS = ("tcn", "dstcn", "gdstcn", "mdtc")
_DEFAULT_DILATION_CYCLE = (1, 2, 4, 8)


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    hidden_channels: int = 128
    kernel_size: int = 8
    num_layers: int = 16
    dilations: tuple[int, ...] | None = None
    groups: int = 1
    mdtc_stacks: int = 4
    mdtc_stack_layers: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).lower())
        if self.kind not in _KINDS:
            raise InvalidConfig(f"unknown backbone kind {self.kind!r}")
        if min(self.hidden_channels, self.kernel_size, self.num_layers) < 1:
            raise InvalidConfig("backbone extents must be >= 1")
        if self.groups < 1:
            raise InvalidConfig("groups must be >= 1")
        if self.hidden_channels % self.groups:
            raise InvalidConfig(
                f"groups={self.groups} does not divide channels={self.hidden_channels}"
            )
        if self.kind == "mdtc":
            if min(self.mdtc_stacks, self.mdtc_stack_layers) < 1:
                raise InvalidConfig("mdtc stack layout must be >= 1")
        if self.dilations is not None:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
            if len(self.dilations) != self.total_blocks:
                raise InvalidConfig(
                    f"dilation schedule has {len(self.dilations)} entries, "
                    f"expected {self.total_blocks}"
                )
            if min(self.dilations) < 1:
                raise InvalidConfig("dilations must be >= 1")

    @property
    def total_blocks(self) -> int:
        if self.kind == "mdtc":
            return 1 + self.mdtc_stacks * self.mdtc_stack_layers
        return self.num_layers

    def dilation_schedule(self) -> tuple[int, ...]:
        if self.dilations is not None:
            return self.dilations
        if self.kind == "mdtc":
            stack = tuple(2**i for i in range(self.mdtc_stack_layers))
            return (1,) + stack * self.mdtc_stacks
        cycle = _DEFAULT_DILATION_CYCLE
        return tuple(cycle[i % len(cycle)] for i in range(self.num_layers))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden_channels": self.hidden_channels,
            "kernel_size": self.kernel_size,
            "num_layers": self.num_layers,
            "dilations": None if self.dilations is None else list(self.dilations),
            "groups": self.groups,
            "mdtc_stacks": self.mdtc_stacks,
            "mdtc_stack_layers": self.mdtc_stack_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown backbone config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("dilations") is not None:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)


def default_backbone(kind: str) -> BackboneConfig:
    """Documented default sizes for each family (see README for targets)."""
    kind = kind.lower()
    if kind == "tcn":
        return BackboneConfig(kind="tcn", hidden_channels=128, kernel_size=8, num_layers=15)
    if kind == "dstcn":
        return BackboneConfig(kind="dstcn", hidden_channels=128, kernel_size=8, num_layers=16)
    if kind == "gdstcn":
        return BackboneConfig(
            kind="gdstcn", hidden_channels=128, kernel_size=8, num_layers=21, groups=4
        )
    if kind == "mdtc":
        return BackboneConfig(
            kind="mdtc",
            hidden_channels=80,
            kernel_size=5,
            num_layers=1,
            mdtc_stacks=4,
            mdtc_stack_layers=5,
        )
    raise InvalidConfig(f"unknown backbone kind {kind!r}")


@dataclass
class BatchNormParams:
    gamma: nn.Parameter
    beta: nn.Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class ConvUnit:
    w: nn.Parameter  # [K, Cin_per_group, Cout]
    bias: nn.Parameter | None
    dilation: int
    groups: int
    bn: BatchNormParams | None
    act: str  # "relu" or "none"

    @property
    def kernel_size(self) -> int:
        return self.w.value.shape[0]

    @property
    def context(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    @property
    def in_channels(self) -> int:
        return self.w.value.shape[1] * self.groups


@dataclass
class Block:
    units: list[ConvUnit]
    residual: bool


@dataclass(frozen=True)
class PosteriorSequence:
    """Per-frame keyword posteriors, clamped into the open interval (0,1)."""

    values: np.ndarray  # [T, K]
    frame_shift_ms: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatch("posterior grid must be [T, K]")


class KwsModel:
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        num_keywords: int,
        cmvn: CmvnStats,
        feature_config: FeatureConfig,
        proj_w: nn.Parameter,
        proj_b: nn.Parameter,
        blocks: list[Block],
        tap_blocks: list[int] | None,
        heads: list[tuple[nn.Parameter, nn.Parameter]],
        meta: dict,
    ):
        self.backbone_cfg = backbone_cfg
        self.num_keywords = num_keywords
        self.cmvn = cmvn
        self.feature_config = feature_config
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.blocks = blocks
        self.tap_blocks = tap_blocks
        self.heads = heads
        self.meta = dict(meta)
        self.keywords = [f"keyword{i}" for i in range(num_keywords)]
        self.thresholds = [0.5] * num_keywords
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise InvalidConfig("duplicate parameter names in model")

    @property
    def dtype(self):
        return self.proj_w.value.dtype

    @property
    def folded(self) -> bool:
        return bool(self.meta.get("folded", False))

    def parameters(self) -> list[nn.Parameter]:
        out = [self.proj_w, self.proj_b]
        for block in self.blocks:
            for u in block.units:
                out.append(u.w)
                if u.bias is not None:
                    out.append(u.bias)
                if u.bn is not None:
                    out.extend([u.bn.gamma, u.bn.beta])
        for w, b in self.heads:
            out.extend([w, b])
        return out

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bi, block in enumerate(self.blocks):
            for ui, u in enumerate(block.units):
                if u.bn is not None:
                    prefix = f"blk{bi:02d}.u{ui}.bn"
                    out.append((f"{prefix}.rm", u.bn.running_mean))
                    out.append((f"{prefix}.rv", u.bn.running_var))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def unit_contexts(self) -> list[int]:
        return [u.context for block in self.blocks for u in block.units]

    @property
    def receptive_field(self) -> int:
        """Frames of input influencing one output frame: 1 + sum (K-1)*d."""
        return 1 + sum(self.unit_contexts())

    def astype(self, dtype) -> "KwsModel":
        """Copy of the model with every parameter and buffer cast to dtype."""
        clone = build_model(
            self.backbone_cfg,
            self.num_keywords,
            self.cmvn,
            feature_config=self.feature_config,
            seed=0,
            _folded=self.folded,
        )
        clone.meta = dict(self.meta)
        clone.keywords = list(self.keywords)
        clone.thresholds = list(self.thresholds)
        for src, dst in zip(self.parameters(), clone.parameters()):
            dst.tensor.data = src.value.astype(dtype)
        for sb, db in zip(self._bn_list(), clone._bn_list()):
            db.running_mean = sb.running_mean.astype(dtype)
            db.running_var = sb.running_var.astype(dtype)
        return clone

    def copy(self) -> "KwsModel":
        return self.astype(self.dtype)

    def _bn_list(self) -> list[BatchNormParams]:
        return [u.bn for b in self.blocks for u in b.units if u.bn is not None]


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(
    cfg: BackboneConfig,
    num_keywords: int,
    cmvn: CmvnStats,
    *,
    feature_config: FeatureConfig | None = None,
    seed: int = 777,
    _folded: bool = False,
) -> KwsModel:
    """Construct and initialize a model.

    Weights use uniform Kaiming-style init with bound sqrt(1/fan_in), biases
    start at zero, norm layers at identity.  The seed makes initialization
    reproducible; it is recorded in the model metadata.
    """
    if num_keywords < 1:
        raise InvalidConfig("need at least one keyword head")
    fcfg = feature_config if feature_config is not None else FeatureConfig()
    if cmvn.mean.shape[0] != fcfg.num_mels:
        raise DimensionMismatch(
            f"cmvn dim {cmvn.mean.shape[0]} != feature dim {fcfg.num_mels}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    c = cfg.hidden_channels
    k = cfg.kernel_size
    dim = fcfg.num_mels

    proj_w = nn.Parameter("proj.w", _init_weight(rng, (dim, c), dim))
    proj_b = nn.Parameter("proj.b", np.zeros(c, dtype=np.float32))

    def make_bn(prefix: str) -> BatchNormParams | None:
        if _folded:
            return None
        return BatchNormParams(
            gamma=nn.Parameter(f"{prefix}.gamma", np.ones(c, dtype=np.float32)),
            beta=nn.Parameter(f"{prefix}.beta", np.zeros(c, dtype=np.float32)),
            running_mean=np.zeros(c, dtype=np.float32),
            running_var=np.ones(c, dtype=np.float32),
        )

    def make_bias(prefix: str) -> nn.Parameter | None:
        if not _folded:
            return None
        return nn.Parameter(f"{prefix}.b", np.zeros(c, dtype=np.float32))

    def dense_unit(bi: int, ui: int, dilation: int) -> ConvUnit:
        prefix = f"blk{bi:02d}.u{ui}"
        return ConvUnit(
            w=nn.Parameter(f"{prefix}.w", _init_weight(rng, (k, c, c), k * c)),
            bias=make_bias(prefix),
            dilation=dilation,
            groups=1,
            bn=make_bn(f"{prefix}.bn"),
            act="relu",
        )

    def dw_unit(bi: int, ui: int, dilation: int) -> ConvUnit:
        prefix = f"blk{bi:02d}.u{ui}"
        return ConvUnit(
            w=nn.Parameter(f"{prefix}.w", _init_weight(rng, (k, 1, c), k)),
            bias=make_bias(prefix),
            dilation=dilation,
            groups=c,
            bn=make_bn(f"{prefix}.bn"),
            act="relu",
        )

    def pw_unit(bi: int, ui: int, groups: int) -> ConvUnit:
        prefix = f"blk{bi:02d}.u{ui}"
        cpg = c // groups
        return ConvUnit(
            w=nn.Parameter(f"{prefix}.w", _init_weight(rng, (1, cpg, c), cpg)),
            bias=make_bias(prefix),
            dilation=1,
            groups=groups,
            bn=make_bn(f"{prefix}.bn"),
            act="relu",
        )

    dilations = cfg.dilation_schedule()
    blocks: list[Block] = []
    tap_blocks: list[int] | None = None
    if cfg.kind == "tcn":
        for i, d in enumerate(dilations):
            blocks.append(Block(units=[dense_unit(i, 0, d)], residual=True))
    elif cfg.kind in ("dstcn", "gdstcn"):
        groups = cfg.groups if cfg.kind == "gdstcn" else 1
        for i, d in enumerate(dilations):
            blocks.append(
                Block(units=[dw_unit(i, 0, d), pw_unit(i, 1, groups)], residual=True)
            )
    else:  # mdtc
        for i, d in enumerate(dilations):
            blocks.append(
                Block(units=[dw_unit(i, 0, d), pw_unit(i, 1, 1)], residual=True)
            )
        # taps: output of the preprocessing block is consumed by stack 1;
        # the summed representation takes the last block of every stack
        tap_blocks = [
            1 + s * cfg.mdtc_stack_layers + (cfg.mdtc_stack_layers - 1)
            for s in range(cfg.mdtc_stacks)
        ]

    heads = []
    for i in range(num_keywords):
        heads.append(
            (
                nn.Parameter(f"head{i}.w", _init_weight(rng, (c, 1), c)),
                nn.Parameter(f"head{i}.b", np.zeros(1, dtype=np.float32)),
            )
        )

    meta = {"init": "kaiming_uniform", "seed": int(seed), "folded": bool(_folded)}
    return KwsModel(
        backbone_cfg=cfg,
        num_keywords=num_keywords,
        cmvn=cmvn,
        feature_config=fcfg,
        proj_w=proj_w,
        proj_b=proj_b,
        blocks=blocks,
        tap_blocks=tap_blocks,
        heads=heads,
        meta=meta,
    )


def _apply_unit(h: nn.Tensor, u: ConvUnit, train: bool, mask: np.ndarray | None) -> nn.Tensor:
    h = nn.causal_conv1d(h, u.w.tensor, dilation=u.dilation, groups=u.groups)
    if u.bias is not None:
        h = nn.add(h, u.bias.tensor)
    if u.bn is not None:
        h = nn.batchnorm(
            h,
            u.bn.gamma.tensor,
            u.bn.beta.tensor,
            u.bn.running_mean,
            u.bn.running_var,
            train=train,
            mask=mask if train else None,
            momentum=u.bn.momentum,
            eps=u.bn.eps,
        )
    if u.act == "relu":
        h = nn.relu(h)
    return h


def forward_tensor(
    model: KwsModel,
    features: np.ndarray,
    lengths: np.ndarray | None = None,
    train: bool = False,
) -> nn.Tensor:
    """Graph-building forward pass: [B, T, D] features -> [B, T, K] posteriors.

    Frames at t >= lengths[i] still produce values but never contribute to
    batch statistics, and downstream losses must not read them.
    """
    if features.ndim != 3:
        raise DimensionMismatch(f"features must be [B, T, D], got {features.shape}")
    dtype = model.dtype
    if features.shape[2] != model.cmvn.mean.shape[0]:
        raise DimensionMismatch(
            f"feature dim {features.shape[2]} != model dim {model.cmvn.mean.shape[0]}"
        )
    b, t, _ = features.shape
    mask = None
    if lengths is not None:
        mask = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)
        mask = mask[:, :, None]

    x = nn.Tensor(np.ascontiguousarray(features, dtype=dtype))
    x = nn.mul(
        nn.sub(x, model.cmvn.mean.astype(dtype)),
        model.cmvn.inv_stddev.astype(dtype),
    )
    h = nn.add(nn.matmul_last(x, model.proj_w.tensor), model.proj_b.tensor)

    taps: list[nn.Tensor] = []
    tap_set = set(model.tap_blocks or [])
    for bi, block in enumerate(model.blocks):
        inp = h
        for u in block.units:
            h = _apply_unit(h, u, train, mask)
        if block.residual:
            h = nn.add(h, inp)
        if bi in tap_set:
            taps.append(h)
    if model.tap_blocks is not None:
        out = taps[0]
        for tap in taps[1:]:
            out = nn.add(out, tap)
    else:
        out = h

    logits = [nn.add(nn.matmul_last(out, w.tensor), bb.tensor) for w, bb in model.heads]
    return nn.sigmoid(nn.concat_last(logits))


def forward(model: KwsModel, batch) -> list[PosteriorSequence]:
    """Inference-mode forward returning clamped, unpadded posterior grids."""
    with nn.no_grad():
        post = forward_tensor(model, batch.features, batch.lengths, train=False)
    values = np.clip(post.data, POSTERIOR_CLAMP_LO, POSTERIOR_CLAMP_HI)
    shift = model.feature_config.shift_ms
    return [
        PosteriorSequence(values=values[i, : int(batch.lengths[i])], frame_shift_ms=shift)
        for i in range(batch.size)
    ]


def count_params(model: KwsModel) -> int:
    """Trainable parameter elements; CMVN stats and running stats excluded."""
    return sum(p.value.size for p in model.parameters() if p.trainable)


def fold_inference(model: KwsModel) -> KwsModel:
    """Fold batch norm into the adjacent convolutions for inference.

    y = gamma * (conv(x) - rm) / sqrt(rv + eps) + beta becomes a conv with
    per-output-channel scaled weights plus a bias.  Idempotent; forward
    outputs match unfolded inference mode within float tolerance.
    """
    folded = build_model(
        model.backbone_cfg,
        model.num_keywords,
        model.cmvn,
        feature_config=model.feature_config,
        seed=int(model.meta.get("seed", 0)),
        _folded=True,
    )
    folded.meta = dict(model.meta)
    folded.meta["folded"] = True
    folded.keywords = list(model.keywords)
    folded.thresholds = list(model.thresholds)
    folded.proj_w.tensor.data = model.proj_w.value.copy()
    folded.proj_b.tensor.data = model.proj_b.value.copy()
    for (sw, sb), (dw, db) in zip(model.heads, folded.heads):
        dw.tensor.data = sw.value.copy()
        db.tensor.data = sb.value.copy()
    for sblock, dblock in zip(model.blocks, folded.blocks):
        for su, du in zip(sblock.units, dblock.units):
            if su.bn is None:
                du.w.tensor.data = su.w.value.copy()
                if su.bias is not None:
                    du.bias.tensor.data = su.bias.value.copy()
                elif du.bias is not None:
                    du.bias.tensor.data = np.zeros_like(du.bias.value)
                continue
            scale = su.bn.gamma.value / np.sqrt(su.bn.running_var + su.bn.eps)
            du.w.tensor.data = (su.w.value * scale).astype(su.w.value.dtype)
            base = su.bias.value if su.bias is not None else 0.0
            du.bias.tensor.data = (
                su.bn.beta.value + (base - su.bn.running_mean) * scale
            ).astype(su.w.value.dtype)
    return folded
