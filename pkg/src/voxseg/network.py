"""Encoder-decoder segmentation network for multi-channel volumes.

The encoder opens with a biased 3x3x3 convolution to ``init_filters``
channels (followed by spatial dropout), then alternates pre-activation
residual blocks

    y = x + conv(relu(norm(conv(relu(norm(x))))))

with strided 3x3x3 convolutions that halve the spatial extent and double
the channels. The decoder mirrors it: a pointwise convolution halves the
channels, trilinear upsampling doubles the extent, the matching encoder
output is added back, and one residual block refines the sum. A final
biased pointwise convolution and sigmoid produce one probability map per
output channel.

Only the stem and head convolutions carry biases; block convolutions are
immediately followed by normalization, which would absorb them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .conv import conv3d
from .errors import ConfigError, ShapeError
from .layers import BatchNormState, batch_norm, group_norm, spatial_dropout, upsample_trilinear2x
from .rngstream import ROLE_INIT, derive_rng

NORM_KINDS = ("group", "instance", "batch")
PARAM_KINDS = ("kernel", "bias", "gamma", "beta")


@dataclass(frozen=True)
class NormSpec:
    """Which normalization the residual blocks use.

    ``group_size`` is the number of channels per group; it must divide the
    channel count at every level. ``instance`` normalizes each channel on
    its own and ``batch`` keeps running statistics across steps.
    """

    kind: str = "group"
    group_size: int = 8
    eps: float = 1e-5

    def validate(self) -> None:
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"norm kind must be one of {NORM_KINDS}, got {self.kind!r}")
        if self.group_size < 1:
            raise ConfigError(f"norm group_size must be >= 1, got {self.group_size}")
        if self.eps <= 0:
            raise ConfigError(f"norm eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    out_channels: int = 3
    init_filters: int = 32
    blocks_per_level: tuple[int, ...] = (1, 2, 2, 4)
    norm: NormSpec = field(default_factory=NormSpec)
    dropout_p: float = 0.2
    engine: str = "blas"

    @property
    def levels(self) -> int:
        return len(self.blocks_per_level)

    def channels_at(self, level: int) -> int:
        return self.init_filters * (1 << level)

    @property
    def spatial_divisor(self) -> int:
        return 1 << (self.levels - 1)

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if self.init_filters < 1:
            raise ConfigError(f"init_filters must be >= 1, got {self.init_filters}")
        if len(self.blocks_per_level) < 2:
            raise ConfigError("need at least two levels")
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigError(f"blocks_per_level entries must be >= 1, got {self.blocks_per_level}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        self.norm.validate()
        if self.norm.kind == "group":
            for lvl in range(self.levels):
                c = self.channels_at(lvl)
                if c % self.norm.group_size != 0:
                    raise ConfigError(
                        f"group norm with group_size {self.norm.group_size} does not divide "
                        f"{c} channels at level {lvl}"
                    )


@dataclass
class Param:
    name: str
    kind: str  # one of PARAM_KINDS
    tensor: T.Tensor


class ParameterStore:
    """Ordered, name-addressed parameter registry (insertion = architecture order)."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, kind: str, data: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if kind not in PARAM_KINDS:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        p = Param(name, kind, T.Tensor(data, requires_grad=True))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None


@dataclass
class Model:
    config: ModelConfig
    store: ParameterStore
    bn_states: dict[str, BatchNormState]
    dtype: np.dtype


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _add_conv(store: ParameterStore, rng_seed_parts, name: str, cin: int, cout: int, k: int, bias: bool, dtype):
    shape = (cout, cin, k, k, k)
    if rng_seed_parts is None:
        kernel = np.zeros(shape, dtype=dtype)  # caller will overwrite (checkpoint load)
    else:
        fan_in = cin * k * k * k
        std = np.sqrt(2.0 / fan_in)
        rng = derive_rng(*rng_seed_parts, name + ".kernel")
        kernel = rng.normal(0.0, std, size=shape).astype(dtype)
    store.add(name + ".kernel", "kernel", kernel)
    if bias:
        store.add(name + ".bias", "bias", np.zeros(cout, dtype=dtype))


def _add_norm(store: ParameterStore, bn_states, norm: NormSpec, name: str, channels: int, dtype):
    store.add(name + ".gamma", "gamma", np.ones(channels, dtype=dtype))
    store.add(name + ".beta", "beta", np.zeros(channels, dtype=dtype))
    if norm.kind == "batch":
        bn_states[name] = BatchNormState.create(channels, dtype=dtype)


def _add_block(store, bn_states, cfg: ModelConfig, seed_parts, name: str, channels: int, dtype):
    _add_norm(store, bn_states, cfg.norm, name + ".norm1", channels, dtype)
    _add_conv(store, seed_parts, name + ".conv1", channels, channels, 3, False, dtype)
    _add_norm(store, bn_states, cfg.norm, name + ".norm2", channels, dtype)
    _add_conv(store, seed_parts, name + ".conv2", channels, channels, 3, False, dtype)


def build_model(config: ModelConfig, seed: int, dtype=np.float32, init_params: bool = True) -> Model:
    """Initialize all parameters: Kaiming fan-in normals for kernels
    (std = sqrt(2 / fan_in)), ones for gamma, zeros for beta and biases.
    Each kernel gets its own RNG stream keyed by (seed, init role, name),
    so initialization is independent of construction order.

    ``init_params=False`` skips the random draws (kernels stay zero) for
    callers about to overwrite every array, e.g. checkpoint loading."""
    config.validate()
    store = ParameterStore()
    bn_states: dict[str, BatchNormState] = {}
    f = config.init_filters
    seed_parts = (seed, ROLE_INIT) if init_params else None
    _add_conv(store, seed_parts, "InitConv", config.in_channels, f, 3, True, dtype)
    for lvl in range(config.levels):
        c = config.channels_at(lvl)
        if lvl > 0:
            _add_conv(store, seed_parts, f"EncoderDown{lvl}", c // 2, c, 3, False, dtype)
        for i in range(config.blocks_per_level[lvl]):
            _add_block(store, bn_states, config, seed_parts, f"EncoderBlock{lvl}.{i}", c, dtype)
    for lvl in range(config.levels - 2, -1, -1):
        c = config.channels_at(lvl)
        _add_conv(store, seed_parts, f"DecoderUp{lvl}", c * 2, c, 1, False, dtype)
        _add_block(store, bn_states, config, seed_parts, f"DecoderBlock{lvl}.0", c, dtype)
    _add_conv(store, seed_parts, "DecoderEnd", f, config.out_channels, 1, True, dtype)
    return Model(config=config, store=store, bn_states=bn_states, dtype=np.dtype(dtype))


def count_parameters(model: Model) -> int:
    return sum(p.tensor.size for p in model.store.params())


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _apply_norm(model: Model, name: str, x: T.Tensor, training: bool) -> T.Tensor:
    spec = model.config.norm
    gamma = model.store[name + ".gamma"]
    beta = model.store[name + ".beta"]
    if spec.kind == "instance":
        return group_norm(x, gamma, beta, num_groups=x.shape[1], eps=spec.eps)
    if spec.kind == "group":
        return group_norm(x, gamma, beta, num_groups=x.shape[1] // spec.group_size, eps=spec.eps)
    return batch_norm(x, gamma, beta, model.bn_states[name], training=training, eps=spec.eps)


def _apply_block(model: Model, name: str, x: T.Tensor, training: bool) -> T.Tensor:
    engine = model.config.engine
    h = _apply_norm(model, name + ".norm1", x, training)
    h = T.relu(h)
    h = conv3d(h, model.store[name + ".conv1.kernel"], None, stride=1, padding=1, engine=engine)
    h = _apply_norm(model, name + ".norm2", h, training)
    h = T.relu(h)
    h = conv3d(h, model.store[name + ".conv2.kernel"], None, stride=1, padding=1, engine=engine)
    return T.add(x, h)


def check_input_shape(config: ModelConfig, shape) -> None:
    if len(shape) != 5:
        raise ShapeError(f"expected [N,C,D,H,W] input, got {tuple(shape)}")
    if shape[1] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {shape[1]}")
    div = config.spatial_divisor
    if any(s % div != 0 or s == 0 for s in shape[2:]):
        raise ShapeError(f"spatial extents {tuple(shape[2:])} must be positive multiples of {div}")


def forward(
    model: Model,
    x: T.Tensor,
    training: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> T.Tensor:
    """Probability maps [N, out_channels, D, H, W] for input [N, in_channels, D, H, W]."""
    cfg = model.config
    check_input_shape(cfg, x.shape)
    if training and cfg.dropout_p > 0 and dropout_rng is None:
        raise ConfigError("training forward with dropout_p > 0 requires a dropout RNG stream")
    engine = cfg.engine

    h = conv3d(x, model.store["InitConv.kernel"], model.store["InitConv.bias"], stride=1, padding=1, engine=engine)
    h = spatial_dropout(h, cfg.dropout_p, dropout_rng, training=training)

    skips: list[T.Tensor] = []
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = conv3d(h, model.store[f"EncoderDown{lvl}.kernel"], None, stride=2, padding=1, engine=engine)
        for i in range(cfg.blocks_per_level[lvl]):
            h = _apply_block(model, f"EncoderBlock{lvl}.{i}", h, training)
        if lvl < cfg.levels - 1:
            skips.append(h)

    for lvl in range(cfg.levels - 2, -1, -1):
        h = conv3d(h, model.store[f"DecoderUp{lvl}.kernel"], None, stride=1, padding=0, engine=engine)
        h = upsample_trilinear2x(h)
        h = T.add(h, skips[lvl])
        h = _apply_block(model, f"DecoderBlock{lvl}.0", h, training)

    h = conv3d(h, model.store["DecoderEnd.kernel"], model.store["DecoderEnd.bias"], stride=1, padding=0, engine=engine)
    return T.sigmoid(h)


# ---------------------------------------------------------------------------
# Config (de)serialization — shared by checkpoints and run configs
# ---------------------------------------------------------------------------


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "in_channels": cfg.in_channels,
        "out_channels": cfg.out_channels,
        "init_filters": cfg.init_filters,
        "blocks_per_level": list(cfg.blocks_per_level),
        "dropout_p": cfg.dropout_p,
        "engine": cfg.engine,
        "norm": {"kind": cfg.norm.kind, "group_size": cfg.norm.group_size, "eps": cfg.norm.eps},
    }


def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def model_config_from_dict(d: dict) -> ModelConfig:
    """Build a ModelConfig from a plain dict, rejecting unknown keys."""
    _reject_unknown(d, ("in_channels", "out_channels", "init_filters", "blocks_per_level", "dropout_p", "engine", "norm"), "model config")
    norm_d = dict(d.get("norm", {}))
    _reject_unknown(norm_d, ("kind", "group_size", "eps"), "norm config")
    norm = NormSpec(
        kind=norm_d.get("kind", NormSpec.kind),
        group_size=int(norm_d.get("group_size", NormSpec.group_size)),
        eps=float(norm_d.get("eps", NormSpec.eps)),
    )
    base = ModelConfig()
    cfg = ModelConfig(
        in_channels=int(d.get("in_channels", base.in_channels)),
        out_channels=int(d.get("out_channels", base.out_channels)),
        init_filters=int(d.get("init_filters", base.init_filters)),
        blocks_per_level=tuple(int(b) for b in d.get("blocks_per_level", base.blocks_per_level)),
        dropout_p=float(d.get("dropout_p", base.dropout_p)),
        engine=str(d.get("engine", base.engine)),
        norm=norm,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Symbolic shape plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanRow:
    name: str
    repeats: int
    channels: int
    spatial: tuple[int, int, int]

    @property
    def shape_str(self) -> str:
        d, h, w = self.spatial
        return f"{self.channels}x{d}x{h}x{w}"


def shape_plan(config: ModelConfig, spatial: tuple[int, int, int] = (160, 192, 128)) -> list[PlanRow]:
    """Layer-by-layer output shapes, computed symbolically (no tensor math)."""
    config.validate()
    check_input_shape(config, (1, config.in_channels) + tuple(spatial))
    rows: list[PlanRow] = []

    def halve(s):
        return tuple(v // 2 for v in s)

    def double(s):
        return tuple(v * 2 for v in s)

    s = tuple(spatial)
    rows.append(PlanRow("InitConv", 1, config.init_filters, s))
    for lvl in range(config.levels):
        c = config.channels_at(lvl)
        if lvl > 0:
            s = halve(s)
            rows.append(PlanRow(f"EncoderDown{lvl}", 1, c, s))
        rows.append(PlanRow(f"EncoderBlock{lvl}", config.blocks_per_level[lvl], c, s))
    for lvl in range(config.levels - 2, -1, -1):
        c = config.channels_at(lvl)
        s = double(s)
        rows.append(PlanRow(f"DecoderUp{lvl}", 1, c, s))
        rows.append(PlanRow(f"DecoderBlock{lvl}", 1, c, s))
    rows.append(PlanRow("DecoderEnd", 1, config.out_channels, s))
    return rows
