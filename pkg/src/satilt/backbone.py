"""Inverted-bottleneck blocks and the attention-augmented MobileNet assembly.

Every learnable tensor in a :class:`Model` is registered under a unique
slash-separated name (``block3/sa/W_K``), which is what checkpoints store.
Initial values are drawn from a generator seeded by ``(seed, name)``, so two
configurations that share a layer name get identical weights for it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .attention import (
    ConfigError,
    SAParams,
    SEParams,
    init_sa_params,
    init_se_params,
    spatial_self_attention,
    squeeze_excite,
)
from .tensor import ShapeError, Tensor

ACTIVATIONS = ("relu", "hardswish")


@dataclass(frozen=True)
class BottleneckConfig:
    in_ch: int
    out_ch: int
    expansion: float = 3.0
    kernel: int = 3
    stride: int = 1
    use_se: bool = False
    use_sa: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        if self.kernel not in (3, 5):
            raise ConfigError(f"kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def expanded(self) -> int:
        return int(round(self.in_ch * self.expansion))

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    blocks: tuple
    sa_feature_sizes: tuple = ()
    head_dim: int = 720
    out_dim: int = 360
    sa_reduction: int = 8
    se_reduction: int = 4
    stem_channels: int = 16
    stem_stride: int = 2
    last_channels: int = 0
    norm: str = "batch"
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    output: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "sa_feature_sizes", tuple(sorted(set(self.sa_feature_sizes), reverse=True)))
        if not self.blocks:
            raise ConfigError("model needs at least one block")
        if self.out_dim < 1 or self.head_dim < 1:
            raise ConfigError("head_dim and out_dim must be >= 1")
        if self.norm not in ("batch", "identity"):
            raise ConfigError(f"norm must be 'batch' or 'identity', got {self.norm!r}")
        if self.output not in ("sigmoid", "linear"):
            raise ConfigError(f"output must be 'sigmoid' or 'linear', got {self.output!r}")
        if self.blocks[0].in_ch != self.stem_channels:
            raise ConfigError(
                f"first block expects {self.blocks[0].in_ch} channels, stem gives {self.stem_channels}"
            )
        for i, (a, b) in enumerate(zip(self.blocks, self.blocks[1:])):
            if a.out_ch != b.in_ch:
                raise ConfigError(f"block {i} outputs {a.out_ch} channels, block {i + 1} expects {b.in_ch}")

    def feature_sizes(self) -> list:
        """Spatial side at which each block's depthwise/SE/SA stages run."""
        size = -(-self.input_size // self.stem_stride)
        out = []
        for b in self.blocks:
            size = -(-size // b.stride)
            out.append(size)
        return out

    def resolved_blocks(self) -> tuple:
        """Blocks with use_sa forced on at the last block of each listed size."""
        sizes = self.feature_sizes()
        blocks = list(self.blocks)
        for target in self.sa_feature_sizes:
            hits = [i for i, s in enumerate(sizes) if s == target]
            if not hits:
                raise ConfigError(f"SA feature size {target} never reached; sizes are {sorted(set(sizes), reverse=True)}")
            i = hits[-1]
            blocks[i] = replace(blocks[i], use_sa=True)
        return tuple(blocks)

    @property
    def final_channels(self) -> int:
        return self.last_channels or self.blocks[-1].out_ch


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale configuration: 32x32 input, SA at 16x16 and 8x8."""
    blocks = (
        BottleneckConfig(16, 16, 3, 3, 1, activation="relu"),
        BottleneckConfig(16, 24, 3, 3, 2, activation="relu"),
        BottleneckConfig(24, 24, 3, 3, 1, use_se=True, use_sa=True, activation="hardswish"),
        BottleneckConfig(24, 48, 3, 3, 2, use_se=True, use_sa=True, activation="hardswish"),
        BottleneckConfig(48, 48, 3, 3, 1, use_se=True, use_sa=True, activation="hardswish"),
    )
    kw = dict(
        input_size=32,
        blocks=blocks,
        sa_feature_sizes=(16, 8),
        head_dim=64,
        out_dim=360,
        sa_reduction=8,
        stem_channels=16,
        stem_stride=1,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


# MobileNetV3-Large: kernel, expanded, out, SE, activation, stride
_V3_LARGE = (
    (3, 16, 16, False, "relu", 1),
    (3, 64, 24, False, "relu", 2),
    (3, 72, 24, False, "relu", 1),
    (5, 72, 40, True, "relu", 2),
    (5, 120, 40, True, "relu", 1),
    (5, 120, 40, True, "relu", 1),
    (3, 240, 80, False, "hardswish", 2),
    (3, 200, 80, False, "hardswish", 1),
    (3, 184, 80, False, "hardswish", 1),
    (3, 184, 80, False, "hardswish", 1),
    (3, 480, 112, True, "hardswish", 1),
    (3, 672, 112, True, "hardswish", 1),
    (5, 672, 160, True, "hardswish", 2),
    (5, 960, 160, True, "hardswish", 1),
    (5, 960, 160, True, "hardswish", 1),
)


def large_config(**overrides) -> ModelConfig:
    """MobileNetV3-Large layout with a 720-d head and SA at 56/28/14/7."""
    blocks = []
    cin = 16
    for k, exp, out, se, act, s in _V3_LARGE:
        blocks.append(BottleneckConfig(cin, out, exp / cin, k, s, use_se=se, activation=act))
        cin = out
    kw = dict(
        input_size=224,
        blocks=tuple(blocks),
        sa_feature_sizes=(56, 28, 14, 7),
        head_dim=720,
        out_dim=360,
        sa_reduction=8,
        stem_channels=16,
        stem_stride=2,
        last_channels=960,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


# ----------------------------------------------------------------------------
# layers


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def fresh(cls, channels: int, momentum: float, eps: float) -> "BatchNorm":
        return cls(
            Tensor(np.ones(channels), tracked=True),
            Tensor(np.zeros(channels), tracked=True),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            eps,
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if not training:
            return ops.affine_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        y, mu, var = ops.batch_norm(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
        self.running_var[...] = m * self.running_var + (1.0 - m) * var
        return y


def _norm(bn: Optional[BatchNorm], x: Tensor, training: bool) -> Tensor:
    return x if bn is None else bn(x, training)


@dataclass
class BottleneckParams:
    expand: Optional[Tensor]  # (1, 1, Cin, Ce) or None when Ce == Cin
    expand_bn: Optional[BatchNorm]
    depthwise: Tensor  # (k, k, Ce)
    depthwise_bn: Optional[BatchNorm]
    se: Optional[SEParams]
    sa: Optional[SAParams]
    project: Tensor  # (1, 1, Ce, Cout)
    project_bn: Optional[BatchNorm]


def inverted_bottleneck(
    x: Tensor,
    cfg: BottleneckConfig,
    params: BottleneckParams,
    training: bool = False,
    capture: Optional[list] = None,
) -> Tensor:
    """expand -> act -> depthwise -> act -> [SE] -> [SA] -> project (+ residual)."""
    if x.shape[-1] != cfg.in_ch:
        raise ShapeError(f"bottleneck expects {cfg.in_ch} channels, got {x.shape[-1]}")
    h = x
    if params.expand is not None:
        h = ops.conv2d(h, params.expand, 1, "same")
        h = ops.activation(cfg.activation, _norm(params.expand_bn, h, training))
    h = ops.depthwise_conv2d(h, params.depthwise, cfg.stride, "same")
    h = ops.activation(cfg.activation, _norm(params.depthwise_bn, h, training))
    if params.se is not None:
        h = squeeze_excite(h, params.se)
    if params.sa is not None:
        h = spatial_self_attention(h, params.sa, capture)
    h = ops.conv2d(h, params.project, 1, "same")
    h = _norm(params.project_bn, h, training)
    if cfg.residual:
        h = ops.add(x, h)
    return h


# ----------------------------------------------------------------------------
# model


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _he_normal(seed: int, name: str, shape, fan_in: int) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(_layer_rng(seed, name).normal(0.0, std, size=shape), tracked=True)


def _glorot(seed: int, name: str, shape) -> Tensor:
    rng = _layer_rng(seed, name)
    return Tensor(ops.glorot_uniform(rng, shape, shape[0], shape[1]), tracked=True)


@dataclass
class Model:
    config: ModelConfig
    seed: int
    stem: Tensor
    stem_bn: Optional[BatchNorm]
    blocks: list
    block_params: list
    last: Optional[Tensor]
    last_bn: Optional[BatchNorm]
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    training: bool = True
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def sa_blocks(self) -> list:
        return [i for i, p in enumerate(self.block_params) if p.sa is not None]

    def sa_params(self) -> list:
        return [p.sa for p in self.block_params if p.sa is not None]

    def __call__(self, image, capture: Optional[dict] = None) -> Tensor:
        return forward(self, image, capture=capture)


def _register(model: Model) -> None:
    params, buffers = {}, {}

    def add_bn(prefix, bn):
        if bn is None:
            return
        params[f"{prefix}/bn/gamma"] = bn.gamma
        params[f"{prefix}/bn/beta"] = bn.beta
        buffers[f"{prefix}/bn/running_mean"] = bn.running_mean
        buffers[f"{prefix}/bn/running_var"] = bn.running_var

    params["stem/conv"] = model.stem
    add_bn("stem", model.stem_bn)
    for i, bp in enumerate(model.block_params):
        pre = f"block{i}"
        if bp.expand is not None:
            params[f"{pre}/expand/conv"] = bp.expand
            add_bn(f"{pre}/expand", bp.expand_bn)
        params[f"{pre}/depthwise/kernel"] = bp.depthwise
        add_bn(f"{pre}/depthwise", bp.depthwise_bn)
        if bp.se is not None:
            for k, t in bp.se.tensors().items():
                params[f"{pre}/se/{k}"] = t
        if bp.sa is not None:
            for k, t in bp.sa.tensors().items():
                params[f"{pre}/sa/{k}"] = t
        params[f"{pre}/project/conv"] = bp.project
        add_bn(f"{pre}/project", bp.project_bn)
    if model.last is not None:
        params["last/conv"] = model.last
        add_bn("last", model.last_bn)
    params["head/w1"] = model.head_w1
    params["head/b1"] = model.head_b1
    params["head/w2"] = model.head_w2
    params["head/b2"] = model.head_b2
    for name, t in params.items():
        t.name = name
    model.params = params
    model.buffers = buffers


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Instantiate ``cfg`` with seeded initial weights."""
    blocks = cfg.resolved_blocks()

    def bn(channels):
        if cfg.norm == "identity":
            return None
        return BatchNorm.fresh(channels, cfg.bn_momentum, cfg.bn_eps)

    stem = _he_normal(seed, "stem/conv", (3, 3, 3, cfg.stem_channels), 27)
    block_params = []
    for i, b in enumerate(blocks):
        pre = f"block{i}"
        ce = b.expanded
        expand = None
        if ce != b.in_ch:
            expand = _he_normal(seed, f"{pre}/expand/conv", (1, 1, b.in_ch, ce), b.in_ch)
        se = init_se_params(ce, _layer_rng(seed, f"{pre}/se"), cfg.se_reduction) if b.use_se else None
        sa = init_sa_params(ce, _layer_rng(seed, f"{pre}/sa"), cfg.sa_reduction) if b.use_sa else None
        block_params.append(
            BottleneckParams(
                expand=expand,
                expand_bn=bn(ce) if expand is not None else None,
                depthwise=_he_normal(seed, f"{pre}/depthwise/kernel", (b.kernel, b.kernel, ce), b.kernel**2),
                depthwise_bn=bn(ce),
                se=se,
                sa=sa,
                project=_he_normal(seed, f"{pre}/project/conv", (1, 1, ce, b.out_ch), ce),
                project_bn=bn(b.out_ch),
            )
        )
    last = last_bn = None
    if cfg.last_channels:
        cin = blocks[-1].out_ch
        last = _he_normal(seed, "last/conv", (1, 1, cin, cfg.last_channels), cin)
        last_bn = bn(cfg.last_channels)
    feat = cfg.final_channels
    model = Model(
        config=cfg,
        seed=seed,
        stem=stem,
        stem_bn=bn(cfg.stem_channels),
        blocks=list(blocks),
        block_params=block_params,
        last=last,
        last_bn=last_bn,
        head_w1=_glorot(seed, "head/w1", (feat, cfg.head_dim)),
        head_b1=Tensor(np.zeros(cfg.head_dim), tracked=True),
        head_w2=_glorot(seed, "head/w2", (cfg.head_dim, cfg.out_dim)),
        head_b2=Tensor(np.zeros(cfg.out_dim), tracked=True),
    )
    _register(model)
    return model


def features(model: Model, image, capture: Optional[dict] = None) -> Tensor:
    """Backbone output before pooling, (..., h, w, C)."""
    cfg = model.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim not in (3, 4) or x.shape[-3:] != (cfg.input_size, cfg.input_size, 3):
        raise ShapeError(f"expected ({cfg.input_size}, {cfg.input_size}, 3) images, got {x.shape}")
    training = model.training
    h = ops.conv2d(x, model.stem, cfg.stem_stride, "same")
    h = ops.hardswish(_norm(model.stem_bn, h, training))
    for i, (b, bp) in enumerate(zip(model.blocks, model.block_params)):
        sink = [] if (capture is not None and bp.sa is not None) else None
        h = inverted_bottleneck(h, b, bp, training, sink)
        if sink:
            capture[i] = sink[0]
    if model.last is not None:
        h = ops.conv2d(h, model.last, 1, "same")
        h = ops.hardswish(_norm(model.last_bn, h, training))
    return h


def forward(model: Model, image, capture: Optional[dict] = None) -> Tensor:
    """Scores for one image (S, S, 3) -> (out_dim,) or a batch -> (B, out_dim).

    ``capture``, if given, receives ``{block_index: attention_matrix}`` for
    every block that carries spatial self-attention.
    """
    cfg = model.config
    h = features(model, image, capture)
    single = h.ndim == 3
    pooled = ops.global_avg_pool(h)
    if single:
        pooled = ops.reshape(pooled, (1, -1))
    z = ops.hardswish(ops.add(ops.matmul(pooled, model.head_w1), model.head_b1))
    z = ops.add(ops.matmul(z, model.head_w2), model.head_b2)
    if cfg.output == "sigmoid":
        z = ops.sigmoid(z)
    if single:
        z = ops.reshape(z, (cfg.out_dim,))
    return z


# ----------------------------------------------------------------------------
# accounting


def conv_params(kh: int, kw: int, cin: int, cout: int, bias: bool = False) -> int:
    return kh * kw * cin * cout + (cout if bias else 0)


def conv_madds(kh: int, kw: int, cin: int, cout: int, h_out: int, w_out: int) -> int:
    return kh * kw * cin * cout * h_out * w_out


def depthwise_madds(kh: int, kw: int, c: int, h_out: int, w_out: int) -> int:
    return kh * kw * c * h_out * w_out


def matmul_madds(m: int, k: int, n: int) -> int:
    return m * k * n


def sa_params_count(channels: int, r: int) -> int:
    low = channels // r
    return 4 * channels * low + 1


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def count_madds(model: Model) -> int:
    """Multiply-accumulates of one single-image forward pass.

    Counts convolutions, the SE and SA matrix products and the dense head.
    Normalization, activations, pooling and softmax are not counted.
    """
    cfg = model.config
    size = -(-cfg.input_size // cfg.stem_stride)
    total = conv_madds(3, 3, 3, cfg.stem_channels, size, size)
    for b, bp in zip(model.blocks, model.block_params):
        ce = b.expanded
        if bp.expand is not None:
            total += conv_madds(1, 1, b.in_ch, ce, size, size)
        size = -(-size // b.stride)
        total += depthwise_madds(b.kernel, b.kernel, ce, size, size)
        if bp.se is not None:
            mid = ce // bp.se.r_se
            total += matmul_madds(1, ce, mid) + matmul_madds(1, mid, ce)
        if bp.sa is not None:
            n, low = size * size, ce // bp.sa.r
            total += 3 * matmul_madds(n, ce, low)  # K, Q, v'
            total += matmul_madds(n, low, n)  # Q K^T
            total += matmul_madds(n, n, low)  # a v'
            total += matmul_madds(n, low, ce)  # V W_V
        total += conv_madds(1, 1, ce, b.out_ch, size, size)
    if cfg.last_channels:
        total += conv_madds(1, 1, model.blocks[-1].out_ch, cfg.last_channels, size, size)
    total += matmul_madds(1, cfg.final_channels, cfg.head_dim)
    total += matmul_madds(1, cfg.head_dim, cfg.out_dim)
    return int(total)
