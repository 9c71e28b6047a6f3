"""Multi-task denoiser, mask generator and the parallel-head baseline.

Networks are plain dictionaries of named tensors evaluated by functional
forward passes. That keeps inner-loop updates differentiable: an adapted head
is just another dict whose tensors hang off the autograd graph of the
originals.

Multi-task network (sequential heads)::

    I_n -> body -> primary head -> residual r
    I_c_hat = I_n + r
    I_n_hat = auxiliary head(concat(I_c_hat, r))

The body is a stem convolution followed by a U-shaped encoder-decoder with
skip connections. Each head ends in a zero-initialized convolution, so a fresh
network predicts ``I_c_hat == I_n`` and ``I_n_hat == 0``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

Params = dict[str, torch.Tensor]

LEAK = 0.2
VARIANTS = ("sequential", "parallel")


@dataclass
class NetworkConfig:
    in_channels: int = 3
    base_channels: int = 32
    depth: int = 2
    head_channels: int = 72
    level_convs: int = 2
    mid_convs: int = 1
    kernel_size: int = 3
    mask_channels: int = 32
    mask_convs: int = 5
    variant: str = "sequential"

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        for name in ("base_channels", "depth", "head_channels", "kernel_size", "mask_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.level_convs < 0 or self.mid_convs < 0:
            raise ConfigError("level_convs and mid_convs must be >= 0")
        if self.mask_convs < 2:
            raise ConfigError("mask_convs must be >= 2")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamPartition:
    """The multi-task network split into body, primary head and auxiliary head."""

    config: NetworkConfig
    body: Params = field(default_factory=dict)
    pri: Params = field(default_factory=dict)
    aux: Params = field(default_factory=dict)

    def named(self):
        for part in ("body", "pri", "aux"):
            for name, t in getattr(self, part).items():
                yield f"{part}.{name}", t

    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.named()]

    def heads(self) -> dict[str, Params]:
        return {"pri": self.pri, "aux": self.aux}


@dataclass
class MaskNetParams:
    config: NetworkConfig
    params: Params = field(default_factory=dict)

    def named(self):
        yield from self.params.items()

    def tensors(self) -> list[torch.Tensor]:
        return list(self.params.values())


# -- construction ---------------------------------------------------------


def _conv_init(params: Params, name: str, cin: int, cout: int, k: int, gen, dtype, zero=False):
    if zero:
        params[f"{name}.weight"] = torch.zeros(cout, cin, k, k, dtype=dtype)
        params[f"{name}.bias"] = torch.zeros(cout, dtype=dtype)
        return
    bound = 1.0 / math.sqrt(cin * k * k)
    params[f"{name}.weight"] = torch.empty(cout, cin, k, k, dtype=dtype).uniform_(-bound, bound, generator=gen)
    params[f"{name}.bias"] = torch.empty(cout, dtype=dtype).uniform_(-bound, bound, generator=gen)


def _generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng))
    return g


def _build_body(cfg: NetworkConfig, gen, dtype) -> Params:
    k, p = cfg.kernel_size, {}
    ch = [cfg.base_channels * 2**lvl for lvl in range(cfg.depth + 1)]
    _conv_init(p, "stem", cfg.in_channels, ch[0], k, gen, dtype)
    for lvl in range(cfg.depth):
        for i in range(cfg.level_convs):
            _conv_init(p, f"enc{lvl}.{i}", ch[lvl], ch[lvl], k, gen, dtype)
        _conv_init(p, f"down{lvl}", ch[lvl], ch[lvl + 1], k, gen, dtype)
    for i in range(cfg.mid_convs):
        _conv_init(p, f"mid.{i}", ch[-1], ch[-1], k, gen, dtype)
    for lvl in reversed(range(cfg.depth)):
        _conv_init(p, f"up{lvl}", ch[lvl + 1], ch[lvl], k, gen, dtype)
        _conv_init(p, f"fuse{lvl}", 2 * ch[lvl], ch[lvl], k, gen, dtype)
    return p


def _build_head(cfg: NetworkConfig, cin: int, gen, dtype) -> Params:
    k, h, p = cfg.kernel_size, cfg.head_channels, {}
    _conv_init(p, "conv0", cin, h, k, gen, dtype)
    _conv_init(p, "conv1", h, h, k, gen, dtype)
    _conv_init(p, "out", h, cfg.in_channels, k, gen, dtype, zero=True)
    return p


def build_multitask(config: NetworkConfig, rng=0, dtype=torch.float32) -> ParamPartition:
    if config.variant != "sequential":
        raise ConfigError("build_multitask expects variant='sequential'; use build_parallel_baseline")
    gen = _generator(rng)
    body = _build_body(config, gen, dtype)
    pri = _build_head(config, config.base_channels, gen, dtype)
    aux = _build_head(config, 2 * config.in_channels, gen, dtype)
    return ParamPartition(config, body, pri, aux)


def build_parallel_baseline(config: NetworkConfig, rng=0, dtype=torch.float32) -> ParamPartition:
    """Shared feature extractor with two parallel heads reading the same features."""
    if config.variant != "parallel":
        raise ConfigError("build_parallel_baseline expects variant='parallel'")
    gen = _generator(rng)
    body = _build_body(config, gen, dtype)
    pri = _build_head(config, config.base_channels, gen, dtype)
    aux = _build_head(config, config.base_channels, gen, dtype)
    return ParamPartition(config, body, pri, aux)


def build_network(config: NetworkConfig, rng=0, dtype=torch.float32) -> ParamPartition:
    if config.variant == "parallel":
        return build_parallel_baseline(config, rng, dtype)
    return build_multitask(config, rng, dtype)


def build_maskgen(config: NetworkConfig, rng=0, dtype=torch.float32) -> MaskNetParams:
    gen = _generator(rng)
    k, c, p = config.kernel_size, config.mask_channels, {}
    _conv_init(p, "conv0", config.in_channels, c, k, gen, dtype)
    for i in range(1, config.mask_convs - 1):
        _conv_init(p, f"conv{i}", c, c, k, gen, dtype)
    _conv_init(p, "out", c, 1, k, gen, dtype)
    return MaskNetParams(config, p)


# -- forward passes -------------------------------------------------------


def _pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    if pad == 0:
        return x
    mode = "reflect" if min(x.shape[-2:]) > pad else "replicate"
    return F.pad(x, (pad, pad, pad, pad), mode=mode)


def _conv(x, params: Params, name: str, stride: int = 1, act: bool = True):
    w = params[f"{name}.weight"]
    y = F.conv2d(_pad(x, w.shape[-1] // 2), w, params[f"{name}.bias"], stride=stride)
    return F.leaky_relu(y, LEAK) if act else y


def _check_input(x: torch.Tensor, channels: int):
    if x.ndim != 4:
        raise DimensionError(f"expected an NCHW batch, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise DimensionError(f"network built for {channels} channels, input has {x.shape[1]}")


def body_forward(body: Params, cfg: NetworkConfig, x: torch.Tensor) -> torch.Tensor:
    """Deep features at input resolution; handles sizes not divisible by 2**depth."""
    h, w = x.shape[-2:]
    m = 2**cfg.depth
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    y = _conv(x, body, "stem")
    skips = []
    for lvl in range(cfg.depth):
        for i in range(cfg.level_convs):
            y = _conv(y, body, f"enc{lvl}.{i}")
        skips.append(y)
        y = _conv(y, body, f"down{lvl}", stride=2)
    for i in range(cfg.mid_convs):
        y = _conv(y, body, f"mid.{i}")
    for lvl in reversed(range(cfg.depth)):
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        y = _conv(y, body, f"up{lvl}")
        y = _conv(torch.cat([y, skips[lvl]], dim=1), body, f"fuse{lvl}")
    return y[..., :h, :w]


def head_forward(head: Params, x: torch.Tensor, features: bool = False):
    """Three-convolution refiner; with ``features`` also return the penultimate activations."""
    y = _conv(x, head, "conv0")
    y = _conv(y, head, "conv1")
    out = _conv(y, head, "out", act=False)
    return (out, y) if features else out


def forward_multitask(params: ParamPartition, noisy: torch.Tensor):
    """Return ``(predicted_clean, predicted_noisy)`` for an NCHW batch."""
    cfg = params.config
    _check_input(noisy, cfg.in_channels)
    feats = body_forward(params.body, cfg, noisy)
    residual = head_forward(params.pri, feats)
    clean = noisy + residual
    if cfg.variant == "parallel":
        return clean, head_forward(params.aux, feats)
    return clean, head_forward(params.aux, torch.cat([clean, residual], dim=1))


def primary_features(params: ParamPartition, noisy: torch.Tensor) -> torch.Tensor:
    """Activations feeding the primary head's final convolution."""
    _check_input(noisy, params.config.in_channels)
    feats = body_forward(params.body, params.config, noisy)
    return head_forward(params.pri, feats, features=True)[1]


def forward_maskgen(params: MaskNetParams, noisy: torch.Tensor) -> torch.Tensor:
    """Single-channel mask in [0, 1] at the input resolution."""
    _check_input(noisy, params.config.in_channels)
    y = noisy
    for i in range(params.config.mask_convs - 1):
        y = _conv(y, params.params, f"conv{i}")
    return torch.sigmoid(_conv(y, params.params, "out", act=False))


# -- parameter bookkeeping -----------------------------------------------


def count_parameters(params) -> int:
    if params is None:
        return 0
    if isinstance(params, dict):
        return sum(count_parameters(v) if isinstance(v, dict) else v.numel() for v in params.values())
    return sum(t.numel() for t in params.tensors())


def clone_heads(params: ParamPartition) -> dict[str, Params]:
    """Detached deep copy of the primary and auxiliary head tensors."""
    return {
        part: {k: v.detach().clone() for k, v in getattr(params, part).items()}
        for part in ("pri", "aux")
    }


def replace_heads(params: ParamPartition, heads: dict[str, Params]) -> ParamPartition:
    """Same body (shared, not copied) with the given heads substituted."""
    for part in ("pri", "aux"):
        old, new = getattr(params, part), heads[part]
        if old.keys() != new.keys():
            raise DimensionError(f"{part} head parameter names differ")
        for k in old:
            if old[k].shape != new[k].shape:
                raise DimensionError(f"{part}.{k}: shape {tuple(new[k].shape)} != {tuple(old[k].shape)}")
    return ParamPartition(params.config, params.body, dict(heads["pri"]), dict(heads["aux"]))


def map_partition(params: ParamPartition, fn) -> ParamPartition:
    return ParamPartition(
        params.config,
        {k: fn(v) for k, v in params.body.items()},
        {k: fn(v) for k, v in params.pri.items()},
        {k: fn(v) for k, v in params.aux.items()},
    )


def map_mask(params: MaskNetParams, fn) -> MaskNetParams:
    return MaskNetParams(params.config, {k: fn(v) for k, v in params.params.items()})


# -- numpy <-> torch ------------------------------------------------------


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """HxWxC array (or list of them) to an NCHW tensor."""
    if isinstance(img, (list, tuple)):
        return torch.cat([to_tensor(i, dtype) for i in img], dim=0)
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    """First item of an NCHW tensor as an HxWxC float array."""
    if t.ndim == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)
