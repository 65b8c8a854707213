"""Composite layers: depthwise-separable conv, squeeze-and-excitation, ghost conv, SPP, inverted residual."""

import math
from typing import List, Optional

from canseg.core.errors import ConfigError, ShapeError
from canseg.models.schemas import GhostConvConfig, InvertedResidualConfig, SPPConfig
from canseg.nn.module import Conv2d, ConvBNAct, Module
from canseg.tensor import ops
from canseg.tensor.tensor import Tensor


class DSConv(Module):
    """Depthwise conv + BN + ReLU, then pointwise conv + BN + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1, rng=None) -> None:
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"ds_conv kernel must be odd, got {kernel}")
        self.depthwise = ConvBNAct(in_channels, in_channels, kernel, stride, groups=in_channels, act="relu", rng=rng)
        self.pointwise = ConvBNAct(in_channels, out_channels, 1, act="relu", rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduction: int = 4, rng=None) -> None:
        super().__init__()
        self.reduced = math.ceil(channels / reduction)
        self.fc1 = Conv2d(channels, self.reduced, 1, bias=True, rng=rng)
        self.fc2 = Conv2d(self.reduced, channels, 1, bias=True, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        s = ops.relu(self.fc1(ops.global_avg_pool(x)))
        return ops.hard_sigmoid(self.fc2(s))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))


class GhostConv(Module):
    """Cheap linear operations: a narrow primary conv plus depthwise transforms of its output.

    The primary conv yields ceil(out/s) intrinsic channels; cheap channel k is a
    depthwise transform of intrinsic channel k mod ceil(out/s). Both parts are
    concatenated to exactly `out_channels`.
    """

    def __init__(self, in_channels: int, cfg: GhostConvConfig, rng=None) -> None:
        super().__init__()
        if cfg.out_channels is None:
            raise ConfigError("ghost conv needs out_channels", path="ghost.out_channels")
        if cfg.ratio > cfg.out_channels:
            raise ConfigError(f"ratio {cfg.ratio} exceeds out_channels {cfg.out_channels}", path="ghost.ratio")
        self.cfg = cfg
        self.primary = Conv2d(in_channels, cfg.primary_channels, cfg.primary_kernel, rng=rng)
        self.cheap: Optional[Conv2d] = None
        if cfg.cheap_channels:
            self.cheap = Conv2d(
                cfg.cheap_channels, cfg.cheap_channels, cfg.cheap_kernel, groups=cfg.cheap_channels, rng=rng
            )
        self.source_channels = [k % cfg.primary_channels for k in range(cfg.cheap_channels)]

    def forward(self, x: Tensor) -> Tensor:
        intrinsic = self.primary(x)
        if self.cheap is None:
            return intrinsic
        ghosts = self.cheap(ops.gather_channels(intrinsic, self.source_channels))
        return ops.concat([intrinsic, ghosts], axis=1)


def check_spp_extent(h: int, w: int, cfg: SPPConfig) -> None:
    for n in cfg.scales:
        if n > min(h, w):
            raise ShapeError(f"spp scale {n} exceeds input extent {h}x{w} (scales {cfg.scales})")


def spp_levels(x: Tensor, cfg: SPPConfig) -> List[Tensor]:
    """Adaptive max pooling of x to n×n for every pyramid scale n."""
    check_spp_extent(x.shape[2], x.shape[3], cfg)
    return [ops.adaptive_max_pool2d(x, n, n) for n in cfg.scales]


def flatten_levels(levels: List[Tensor]) -> Tensor:
    """Concatenate n×n maps along a single position axis: (N, C, 1, Σ n²)."""
    N, C = levels[0].shape[:2]
    flat = [ops.reshape(t, (N, C, 1, t.shape[2] * t.shape[3])) for t in levels]
    return flat[0] if len(flat) == 1 else ops.concat(flat, axis=3)


def spp_flatten(x: Tensor, cfg: SPPConfig) -> Tensor:
    return flatten_levels(spp_levels(x, cfg))


class InvertedResidual(Module):
    """1×1 expand, depthwise conv, optional SE, linear 1×1 projection; skip when shapes allow."""

    def __init__(self, cfg: InvertedResidualConfig, se_reduction: int = 4, rng=None) -> None:
        super().__init__()
        self.cfg = cfg
        act = cfg.activation
        e = cfg.expand_channels
        self.expand = ConvBNAct(cfg.in_channels, e, 1, act=act, rng=rng)
        self.depthwise = ConvBNAct(e, e, cfg.kernel, cfg.stride, groups=e, act=act, rng=rng)
        self.se = SqueezeExcite(e, se_reduction, rng=rng) if cfg.use_se else None
        self.project = ConvBNAct(e, cfg.out_channels, 1, act=None, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.depthwise(self.expand(x))
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        return ops.add(x, y) if self.cfg.use_residual else y
