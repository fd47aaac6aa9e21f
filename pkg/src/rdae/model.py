"""Symmetric residual encoder-decoder.

Layout for ``levels = L`` and widths ``c[0..L-1]``::

    stem         conv K  in_ch -> c0, BN, ReLU                   (S)
    encoder[l]   residual units at c[l], keep skip[l],
                 stride-2 conv c[l] -> c[l+1] (c[L-1] at the end)  (S / 2^l -> S / 2^(l+1))
    decoder[l]   nearest 2x upsample, conv -> c[l], BN, ReLU      (= f(X_dec))
                 add skip[l]                                      (Y = X_enc + f(X_dec))
                 residual units at c[l]
    head         1x1 conv c0 -> in_ch, linear

Every residual unit computes ``x + conv-BN-ReLU, conv-BN-ReLU, conv-BN (x)``
with no activation after the sum, so zeroing a branch gives the identity.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .tensor import (
    DTYPE,
    Parameter,
    RngState,
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    grad_enabled,
    kaiming_uniform,
    no_grad,
    relu,
    upsample_nearest2x,
)


class ConfigError(ValueError):
    """Invalid model configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelConfig:
    input_channels: int = 3
    input_size: int = 128
    levels: int = 4
    channels_per_level: tuple[int, ...] = (16, 32, 64, 128)
    units_per_level: int = 1
    filter_size: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels_per_level = tuple(int(c) for c in self.channels_per_level)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.levels

    @property
    def latent_channels(self) -> int:
        return self.channels_per_level[-1]

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ConfigError("input_channels", f"must be >= 1, got {self.input_channels}")
        if self.levels < 1:
            raise ConfigError("levels", f"must be >= 1, got {self.levels}")
        if self.input_size < 1 or self.input_size % 2 ** self.levels:
            raise ConfigError("input_size", f"{self.input_size} is not divisible by 2^levels = {2 ** self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ConfigError("channels_per_level",
                              f"needs {self.levels} entries (one per level), got {len(self.channels_per_level)}")
        if any(c < 1 for c in self.channels_per_level):
            raise ConfigError("channels_per_level", f"widths must be positive, got {self.channels_per_level}")
        if self.units_per_level < 0:
            raise ConfigError("units_per_level", f"must be >= 0, got {self.units_per_level}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError("filter_size", f"K must be odd and positive, got {self.filter_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)


class Module:
    """Container with ordered, named parameters and batch-norm statistics."""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self.own_parameters():
            yield prefix + key, p
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_stats(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_stats(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()


class Conv2d(Module):
    def __init__(self, rng: RngState, cin: int, cout: int, k: int, stride: int = 1):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout, DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float, eps: float):
        self.gamma = Parameter(np.ones(channels, DTYPE))
        self.beta = Parameter(np.zeros(channels, DTYPE))
        self.stats = RunningStats.fresh(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.training, self.stats, self.momentum, self.eps)


class ConvBN(Module):
    """conv -> BN -> optional ReLU."""

    def __init__(self, rng: RngState, cin: int, cout: int, k: int, cfg: ModelConfig,
                 stride: int = 1, activate: bool = True):
        self.conv = Conv2d(rng, cin, cout, k, stride)
        self.bn = BatchNorm2d(cout, cfg.bn_momentum, cfg.bn_eps)
        self.activate = activate

    def __call__(self, x: Tensor) -> Tensor:
        if not self.bn.training and not grad_enabled():
            return self._folded(x)
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y

    def _folded(self, x: Tensor) -> Tensor:
        # graph-free inference: the running statistics become a per-channel affine map
        conv, bn = self.conv, self.bn
        if not bn.stats.initialized:
            raise RuntimeError("batchnorm2d infer mode needs initialized running statistics")
        dt = conv.weight.dtype
        inv = (1.0 / np.sqrt(bn.stats.var.astype(np.float64) + bn.eps)).astype(dt)
        scale = bn.gamma.data * inv
        shift = (conv.bias.data - bn.stats.mean.astype(dt)) * scale + bn.beta.data
        w = conv.weight.data
        out_size = x.shape[0] * (x.shape[2] // conv.stride) * (x.shape[3] // conv.stride) * w.shape[0]
        if w.size <= out_size:
            # fold into the weights, written straight into the (K, K, C, O) layout conv2d uses
            folded = np.empty(w.shape[2:] + w.shape[1::-1], dtype=dt)
            np.multiply(w.transpose(2, 3, 1, 0), scale, out=folded)
            y = conv2d(x, Tensor(folded.transpose(3, 2, 0, 1)), Tensor(shift), conv.stride, conv.padding)
        else:
            # deep layers: the weights outweigh the feature map, so scale the output instead
            y = conv2d(x, conv.weight, None, conv.stride, conv.padding)
            y.data *= scale.reshape(1, -1, 1, 1)
            y.data += shift.reshape(1, -1, 1, 1)
        if self.activate:
            np.maximum(y.data, 0, out=y.data)
        return y


class ResidualUnit(Module):
    """H(x) = F(x) + x with F a stack of three convolutions."""

    def __init__(self, rng: RngState, cin: int, cout: int, cfg: ModelConfig):
        k = cfg.filter_size
        self.branch = [
            ConvBN(rng, cin, cout, k, cfg),
            ConvBN(rng, cout, cout, k, cfg),
            ConvBN(rng, cout, cout, k, cfg, activate=False),
        ]
        # a 1x1 projection only when widths differ; never used by the default layout
        self.projection = Conv2d(rng, cin, cout, 1) if cin != cout else None

    def residual(self, x: Tensor) -> Tensor:
        for layer in self.branch:
            x = layer(x)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        shortcut = self.projection(x) if self.projection is not None else x
        return add(self.residual(x), shortcut)


class EncoderLevel(Module):
    def __init__(self, rng: RngState, cin: int, cout: int, cfg: ModelConfig):
        self.units = [ResidualUnit(rng, cin, cin, cfg) for _ in range(cfg.units_per_level)]
        self.down = ConvBN(rng, cin, cout, cfg.filter_size, cfg, stride=2)


class DecoderLevel(Module):
    def __init__(self, rng: RngState, cin: int, cout: int, cfg: ModelConfig):
        self.up = ConvBN(rng, cin, cout, cfg.filter_size, cfg)
        self.units = [ResidualUnit(rng, cout, cout, cfg) for _ in range(cfg.units_per_level)]


class Model(Module):
    """Residual autoencoder; see the module docstring for the layer layout."""

    def __init__(self, config: ModelConfig, rng: RngState):
        config.validate()
        self.config = config
        ch = config.channels_per_level
        k = config.filter_size
        self.stem = ConvBN(rng.child(0), config.input_channels, ch[0], k, config)
        self.encoder = []
        for lvl in range(config.levels):
            nxt = ch[lvl + 1] if lvl + 1 < config.levels else ch[-1]
            self.encoder.append(EncoderLevel(rng.child(1, lvl), ch[lvl], nxt, config))
        self.decoder = []
        for lvl in range(config.levels):
            src = ch[lvl + 1] if lvl + 1 < config.levels else ch[-1]
            self.decoder.append(DecoderLevel(rng.child(2, lvl), src, ch[lvl], config))
        self.head = Conv2d(rng.child(3), ch[0], config.input_channels, 1)
        # the linear head starts at zero: summed residual features have a large
        # variance, and a random head would begin far outside the pixel range
        self.head.weight.data[...] = 0.0
        for name, p in self.named_parameters():
            p.name = name
        self.training = True

    # -- modes ---------------------------------------------------------------

    def train(self) -> "Model":
        self._set_mode(True)
        return self

    def eval(self) -> "Model":
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool) -> None:
        self.training = training
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.training = training

    def freeze(self) -> "Model":
        """Switch to inference mode and stop gradient tracking for parameters."""
        self.eval()
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward ---------------------------------------------------------------

    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=DTYPE))
        cfg = self.config
        if x.data.ndim != 4:
            raise ShapeError(f"batch must be 4-D (B,C,S,S), got shape {x.shape}")
        b, c, h, w = x.shape
        if c != cfg.input_channels:
            raise ShapeError(f"batch has {c} channels, model expects {cfg.input_channels}")
        if h != cfg.input_size or w != cfg.input_size:
            raise ShapeError(f"batch spatial size {h}x{w} does not match model input_size {cfg.input_size}; "
                             "resize frames before scoring")
        return x

    def encode_with_skips(self, x: Tensor, trace: dict | None = None):
        h = self.stem(x)
        skips = []
        for lvl, level in enumerate(self.encoder):
            for unit in level.units:
                h = unit(h)
            skips.append(h)
            if trace is not None:
                trace[f"encoder.{lvl}.skip"] = h.data
            h = level.down(h)
            if trace is not None:
                trace[f"encoder.{lvl}.down"] = h.data
        return h, skips

    def decode(self, latent: Tensor, skips: list[Tensor], trace: dict | None = None) -> Tensor:
        h = latent
        for lvl in reversed(range(self.config.levels)):
            level = self.decoder[lvl]
            x_dec = upsample_nearest2x(h)
            h = add(skips[lvl], level.up(x_dec))
            if trace is not None:
                trace[f"decoder.{lvl}.sum"] = h.data
            for unit in level.units:
                h = unit(h)
            if trace is not None:
                trace[f"decoder.{lvl}.out"] = h.data
        return self.head(h)

    def __call__(self, batch, trace: dict | None = None) -> Tensor:
        x = self._check_input(batch)
        latent, skips = self.encode_with_skips(x, trace)
        if trace is not None:
            trace["latent"] = latent.data
        return self.decode(latent, skips, trace)

    def encode(self, batch) -> Tensor:
        x = self._check_input(batch)
        return self.encode_with_skips(x)[0]

    def reconstruct(self, batch) -> np.ndarray:
        """Graph-free forward pass returning a float32 array."""
        with no_grad():
            return self(batch).data

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def build(config: ModelConfig | None = None, rng: RngState | int = 0) -> Model:
    if not isinstance(rng, RngState):
        rng = RngState(rng)
    return Model(config or ModelConfig(), rng)


def forward(model: Model, batch) -> Tensor:
    return model(batch)


def encode(model: Model, batch) -> Tensor:
    return model.encode(batch)


def param_count(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())
