"""
Context Aggregation Network.

Spatial branch (1/8) and context branch (backbone to 1/16, global then local
attention, channel bottleneck, upsampled to 1/8) meet in the feature fusion
module; a depthwise-separable + pointwise classifier produces logits that are
upsampled to the input size. Training mode adds 1×1 auxiliary heads on the
two attention outputs.
"""

import logging
import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from canseg.core.errors import ShapeError
from canseg.models.schemas import ModelConfig
from canseg.nn.attention import LocalAttention, ReducedGlobalAttention
from canseg.nn.blocks import DSConv, InvertedResidual
from canseg.nn.module import Conv2d, ConvBNAct, Module, ModuleList
from canseg.tensor import ops
from canseg.tensor.tensor import Tensor

logger = logging.getLogger(__name__)


class ForwardOutput(NamedTuple):
    primary_logits: Tensor
    aux_ga_logits: Optional[Tensor] = None
    aux_la_logits: Optional[Tensor] = None


def _check_divisible(x: Tensor, factor: int, where: str) -> None:
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"{where} needs height and width divisible by {factor}, got {h}x{w}")


class SpatialBranch(Module):
    """7×7/2 conv, two stride-2 depthwise-separable convs, 1×1 conv: output at 1/8."""

    def __init__(self, widths: List[int], rng=None) -> None:
        super().__init__()
        c1, c2, c3, c4 = widths
        self.conv1 = ConvBNAct(3, c1, 7, stride=2, rng=rng)
        self.conv2 = DSConv(c1, c2, 3, stride=2, rng=rng)
        self.conv3 = DSConv(c2, c3, 3, stride=2, rng=rng)
        self.conv4 = ConvBNAct(c3, c4, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        _check_divisible(x, 8, "spatial branch")
        return self.conv4(self.conv3(self.conv2(self.conv1(x))))


class Backbone(Module):
    def __init__(self, config: ModelConfig, rng=None) -> None:
        super().__init__()
        self.stem = ConvBNAct(config.input_channels, config.stem_channels, 3, stride=2, act="hard_swish", rng=rng)
        self.blocks = ModuleList([InvertedResidual(b, config.se_reduction, rng=rng) for b in config.backbone])
        self.last: Optional[ConvBNAct] = None
        if config.backbone_out_channels:
            self.last = ConvBNAct(
                config.backbone[-1].out_channels, config.backbone_out_channels, 1, act="hard_swish", rng=rng
            )

    def forward(self, x: Tensor) -> Tensor:
        y = self.stem(x)
        for block in self.blocks:
            y = block(y)
        return self.last(y) if self.last is not None else y

    def channel_trace(self) -> List[int]:
        trace = [self.stem.conv.out_channels] + [b.cfg.out_channels for b in self.blocks]
        if self.last is not None:
            trace.append(self.last.conv.out_channels)
        return trace


class ContextBranch(Module):
    def __init__(self, config: ModelConfig, rng=None) -> None:
        super().__init__()
        channels = config.context_channels
        self.backbone = Backbone(config, rng=rng)
        self.ga = ReducedGlobalAttention(
            channels,
            config.ga_embed_channels,
            config.ga_value_channels,
            config.spp,
            config.ghost,
            groups=config.ga_groups,
            use_spp=config.ga_use_spp,
            use_cheap_ops=config.ga_use_cheap_ops,
            rng=rng,
        )
        self.la = LocalAttention(channels, rng=rng)
        self.bottleneck = ConvBNAct(channels, config.context_out_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Return (context features at 1/8, GA output at 1/16, LA output at 1/16)."""
        _check_divisible(x, 16, "context branch")
        ga_feat = self.ga(self.backbone(x))
        la_feat = self.la(ga_feat)
        h, w = x.shape[2] // 8, x.shape[3] // 8
        context = ops.bilinear_resize(self.bottleneck(la_feat), h, w)
        return context, ga_feat, la_feat


class FeatureFusion(Module):
    """Concat → downsampling bottleneck → channel attention (f + f·gate) → upsampling bottleneck."""

    def __init__(self, spatial_channels: int, context_channels: int, config: ModelConfig, rng=None) -> None:
        super().__init__()
        self.style = config.ffm_style
        out = config.ffm_out_channels
        cat = spatial_channels + context_channels
        if self.style == "add":
            self.fuse = ConvBNAct(spatial_channels, out, 1, rng=rng)
        elif self.style == "concat":
            self.fuse = ConvBNAct(cat, out, 1, rng=rng)
        else:
            mid = cat if self.style == "concat_attention" else config.ffm_mid_channels
            reduced = math.ceil(mid / config.ffm_attention_reduction)
            self.down = ConvBNAct(cat, mid, 1, rng=rng)
            self.fc1 = Conv2d(mid, reduced, 1, bias=True, rng=rng)
            self.fc2 = Conv2d(reduced, mid, 1, bias=True, rng=rng)
            self.up = ConvBNAct(mid, out, 1, rng=rng)

    def gate(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(f)))))

    def forward(self, spatial: Tensor, context: Tensor) -> Tensor:
        if spatial.shape[0] != context.shape[0] or spatial.shape[2:] != context.shape[2:]:
            raise ShapeError(f"fusion inputs disagree: spatial {spatial.shape}, context {context.shape}")
        if self.style == "add":
            return self.fuse(ops.add(spatial, context))
        joined = ops.concat([spatial, context], axis=1)
        if self.style == "concat":
            return self.fuse(joined)
        f = self.down(joined)
        f = ops.add(f, ops.mul(f, self.gate(f)))
        return self.up(f)


class Classifier(Module):
    def __init__(self, channels: int, num_classes: int, rng=None) -> None:
        super().__init__()
        self.ds = DSConv(channels, channels, 3, rng=rng)
        self.cls = Conv2d(channels, num_classes, 1, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.cls(self.ds(x))


class CanModel(Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.spatial = SpatialBranch(config.spatial_channels, rng=rng)
        self.context = ContextBranch(config, rng=rng)
        self.ffm = FeatureFusion(config.spatial_channels[3], config.context_out_channels, config, rng=rng)
        self.classifier = Classifier(config.ffm_out_channels, config.num_classes, rng=rng)
        self.aux_ga = Conv2d(config.context_channels, config.num_classes, 1, bias=True, rng=rng)
        self.aux_la = Conv2d(config.context_channels, config.num_classes, 1, bias=True, rng=rng)
        self.train(config.train_mode)
        logger.debug("built CanModel with %d parameters", self.num_parameters())

    def forward(self, x: Tensor) -> ForwardOutput:
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected {self.config.input_channels} input channels, got {x.shape[1]}")
        _check_divisible(x, 16, "can_forward")
        spatial = self.spatial(x)
        context, ga_feat, la_feat = self.context(x)
        fused = self.ffm(spatial, context)
        logits = ops.bilinear_resize(self.classifier(fused), x.shape[2], x.shape[3])
        if not self.training:
            return ForwardOutput(logits)
        return ForwardOutput(logits, self.aux_ga(ga_feat), self.aux_la(la_feat))


def build_model(config: ModelConfig) -> CanModel:
    return CanModel(config)
