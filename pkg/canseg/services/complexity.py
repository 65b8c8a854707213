"""
Analytical complexity profiler.

`profile` walks the layer graph symbolically and emits one row per
primitive layer; `trace_costs` runs a real forward under a CostTracer and is
the independent cross-check. Both follow the same convention:

- conv: N·k²·(Cin/groups)·Cout·Hout·Wout, matmul: N·G·P·Q·R, MAdd = 2·FLOPs
- batch norm, activations, add, mul, softmax, resize: output elements
- adaptive max pool, global average pool: input elements
- reshape, permute, concat, channel gather: free

The activation peak is taken over the same execution order: each row counts
its input and output plus every tensor parked by an enclosing block (skip
inputs, gate operands, the spatial output awaiting fusion).
"""

import logging
import math
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from functools import singledispatch
from typing import ContextManager, Iterator, List, Sequence, Set, Tuple

import numpy as np

from canseg.core.errors import ShapeError
from canseg.models.schemas import (
    AttentionCost,
    ComplexityReport,
    ComplexityRow,
    ComplexityTotals,
    ModelConfig,
    SPPConfig,
    VariantCost,
)
from canseg.nn.attention import LocalAttention, ReducedGlobalAttention
from canseg.nn.blocks import DSConv, GhostConv, InvertedResidual, SqueezeExcite, check_spp_extent
from canseg.nn.can import Backbone, CanModel, Classifier, ContextBranch, FeatureFusion, SpatialBranch
from canseg.nn.module import BatchNorm2d, Conv2d, ConvBNAct, Module
from canseg.tensor.tensor import CostTracer, Tensor, no_grad

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int, int]
BYTES_PER_ELEMENT = 4
FUSION_STYLES = ("add", "concat", "concat_attention", "concat_attention_bottleneck")


@dataclass
class _Walk:
    """Rows in execution order plus the live-tensor bookkeeping behind the activation peak.

    A row's live set is its input, its output and every tensor parked by an
    enclosing `hold` or `retain`.
    """

    rows: List[ComplexityRow] = field(default_factory=list)
    peak: int = 0
    parked: List[Tuple[int, int]] = field(default_factory=list)
    seen: Set[int] = field(default_factory=set)

    def first_visit(self, module: Module) -> bool:
        """Shared layers (SPP key/value projections) own their parameters once."""
        if id(module) in self.seen:
            return False
        self.seen.add(id(module))
        return True

    @contextmanager
    def _park(self, shapes: Sequence[Shape], from_row: int) -> Iterator[None]:
        entry = (from_row, sum(BYTES_PER_ELEMENT * math.prod(s) for s in shapes))
        self.parked.append(entry)
        try:
            yield
        finally:
            self.parked.remove(entry)

    def hold(self, *shapes: Shape) -> ContextManager[None]:
        """Tensors live across every enclosed row that does not read them."""
        return self._park(shapes, len(self.rows))

    def retain(self, *shapes: Shape) -> ContextManager[None]:
        """Tensors the next row reads and later rows still need (skip inputs)."""
        return self._park(shapes, len(self.rows) + 1)

    def add(
        self,
        name: str,
        kind: str,
        in_shape: Shape,
        out_shape: Shape,
        flops: int,
        params: int = 0,
        input_parked: bool = False,
    ) -> Shape:
        """`input_parked`: the input is already counted among the parked tensors."""
        madd = 2 * flops if kind in CostTracer.MAC_KINDS else flops
        out_bytes = BYTES_PER_ELEMENT * math.prod(out_shape)
        live = out_bytes + sum(nbytes for start, nbytes in self.parked if start <= len(self.rows))
        if not input_parked:
            live += BYTES_PER_ELEMENT * math.prod(in_shape)
        self.peak = max(self.peak, live)
        self.rows.append(
            ComplexityRow(
                name=name,
                kind=kind,
                params=params,
                flops=flops,
                madd=madd,
                out_shape=tuple(out_shape),
                activation_bytes=out_bytes,
            )
        )
        return tuple(out_shape)

    def elementwise(self, name: str, kind: str, shape: Shape, input_parked: bool = False) -> Shape:
        return self.add(name, kind, shape, shape, math.prod(shape), input_parked=input_parked)

    def totals(self) -> ComplexityTotals:
        return ComplexityTotals(
            params=sum(r.params for r in self.rows),
            flops=sum(r.flops for r in self.rows),
            madd=sum(r.madd for r in self.rows),
            activation_bytes=sum(r.activation_bytes for r in self.rows),
        )


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _check_divisible(shape: Shape, factor: int, where: str) -> None:
    if shape[2] % factor or shape[3] % factor:
        raise ShapeError(f"{where} needs height and width divisible by {factor}, got {shape[2]}x{shape[3]}")


@singledispatch
def _walk(module: Module, shape, walk: _Walk, name: str):
    raise TypeError(f"no cost rule for {type(module).__name__}")


@_walk.register
def _(m: Conv2d, shape: Shape, walk: _Walk, name: str) -> Shape:
    N, C, H, W = shape
    if C != m.in_channels:
        raise ShapeError(f"{name or 'conv'} expects {m.in_channels} channels, got {C}")
    Ho = (H + 2 * m.padding - m.kernel) // m.stride + 1
    Wo = (W + 2 * m.padding - m.kernel) // m.stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"{name or 'conv'}: kernel {m.kernel} does not fit input {H}x{W}")
    flops = N * m.kernel * m.kernel * (C // m.groups) * m.out_channels * Ho * Wo
    params = (m.weight.size + (m.bias.size if m.bias is not None else 0)) if walk.first_visit(m) else 0
    return walk.add(name, "conv2d", shape, (N, m.out_channels, Ho, Wo), flops, params)


@_walk.register
def _(m: BatchNorm2d, shape: Shape, walk: _Walk, name: str) -> Shape:
    return walk.add(name, "batch_norm", shape, shape, math.prod(shape), 4 * m.channels if walk.first_visit(m) else 0)


@_walk.register
def _(m: ConvBNAct, shape: Shape, walk: _Walk, name: str) -> Shape:
    y = _walk(m.conv, shape, walk, _join(name, "conv"))
    y = _walk(m.bn, y, walk, _join(name, "bn"))
    return walk.elementwise(_join(name, "act"), m.act, y) if m.act else y


@_walk.register
def _(m: DSConv, shape: Shape, walk: _Walk, name: str) -> Shape:
    y = _walk(m.depthwise, shape, walk, _join(name, "depthwise"))
    return _walk(m.pointwise, y, walk, _join(name, "pointwise"))


@_walk.register
def _(m: SqueezeExcite, shape: Shape, walk: _Walk, name: str) -> Shape:
    N, C = shape[:2]
    with walk.retain(shape):
        s = walk.add(_join(name, "pool"), "avg_pool", shape, (N, C, 1, 1), math.prod(shape))
        s = _walk(m.fc1, s, walk, _join(name, "fc1"))
        s = walk.elementwise(_join(name, "relu"), "relu", s)
        s = _walk(m.fc2, s, walk, _join(name, "fc2"))
        walk.elementwise(_join(name, "gate"), "hard_sigmoid", s)
    return walk.elementwise(_join(name, "scale"), "mul", shape)


@_walk.register
def _(m: GhostConv, shape: Shape, walk: _Walk, name: str) -> Shape:
    y = _walk(m.primary, shape, walk, _join(name, "primary"))
    if m.cheap is None:
        return y
    N, _, H, W = y
    with walk.retain(y):
        _walk(m.cheap, (N, m.cfg.cheap_channels, H, W), walk, _join(name, "cheap"))
    return (N, m.cfg.out_channels, H, W)


@_walk.register
def _(m: InvertedResidual, shape: Shape, walk: _Walk, name: str) -> Shape:
    with walk.retain(shape) if m.cfg.use_residual else nullcontext():
        y = _walk(m.expand, shape, walk, _join(name, "expand"))
        y = _walk(m.depthwise, y, walk, _join(name, "depthwise"))
        if m.se is not None:
            y = _walk(m.se, y, walk, _join(name, "se"))
        y = _walk(m.project, y, walk, _join(name, "project"))
        return walk.elementwise(_join(name, "residual"), "add", y) if m.cfg.use_residual else y


@_walk.register
def _(m: ReducedGlobalAttention, shape: Shape, walk: _Walk, name: str) -> Shape:
    N, C, h, w = shape
    G, A = m.groups, h * w
    E, V = m.embed // G, m.value_channels // G
    M = m.spp.positions if m.use_spp else A
    if m.use_spp:
        check_spp_extent(h, w, m.spp)
    with walk.retain(shape):
        q = _walk(m.query, shape, walk, _join(name, "query"))
        with walk.hold(q):
            if m.use_spp:
                for n in m.spp.scales:
                    walk.add(_join(name, f"spp{n}"), "max_pool", shape, (N, C, n, n), math.prod(shape), input_parked=True)
                for n in m.spp.scales:
                    _walk(m.key, (N, C, n, n), walk, _join(name, f"key.l{n}"))
                for n in m.spp.scales:
                    _walk(m.value, (N, C, n, n), walk, _join(name, f"value.l{n}"))
            else:
                _walk(m.key, shape, walk, _join(name, "key"))
                _walk(m.value, shape, walk, _join(name, "value"))
        with walk.hold((N, m.value_channels, 1, M)):
            with walk.hold((N, m.embed, 1, M)):
                walk.add(_join(name, "affinity"), "matmul", (N, G, A, E), (N, G, A, M), N * G * A * E * M)
            walk.elementwise(_join(name, "softmax"), "softmax", (N, G, A, M))
            walk.add(_join(name, "aggregate"), "matmul", (N, G, A, M), (N, G, A, V), N * G * A * M * V)
        _walk(m.out_proj, (N, m.value_channels, h, w), walk, _join(name, "out_proj"))
        return walk.elementwise(_join(name, "residual"), "add", shape)


@_walk.register
def _(m: LocalAttention, shape: Shape, walk: _Walk, name: str) -> Shape:
    with walk.retain(shape):
        y = _walk(m.dw1, shape, walk, _join(name, "dw1"))
        y = _walk(m.dw2, y, walk, _join(name, "dw2"))
        y = _walk(m.dw3, y, walk, _join(name, "dw3"))
        walk.elementwise(_join(name, "gate"), "sigmoid", y)
        with walk.hold(y):
            walk.elementwise(_join(name, "scale"), "mul", shape, input_parked=True)
        return walk.elementwise(_join(name, "residual"), "add", shape)


@_walk.register
def _(m: SpatialBranch, shape: Shape, walk: _Walk, name: str) -> Shape:
    _check_divisible(shape, 8, "spatial branch")
    y = shape
    for child in ("conv1", "conv2", "conv3", "conv4"):
        y = _walk(getattr(m, child), y, walk, _join(name, child))
    return y


@_walk.register
def _(m: Backbone, shape: Shape, walk: _Walk, name: str) -> Shape:
    y = _walk(m.stem, shape, walk, _join(name, "stem"))
    for i, block in enumerate(m.blocks):
        y = _walk(block, y, walk, _join(name, f"blocks.{i}"))
    if m.last is not None:
        y = _walk(m.last, y, walk, _join(name, "last"))
    return y


@_walk.register
def _(m: ContextBranch, shape: Shape, walk: _Walk, name: str) -> Shape:
    _check_divisible(shape, 16, "context branch")
    y = _walk(m.backbone, shape, walk, _join(name, "backbone"))
    y = _walk(m.ga, y, walk, _join(name, "ga"))
    y = _walk(m.la, y, walk, _join(name, "la"))
    y = _walk(m.bottleneck, y, walk, _join(name, "bottleneck"))
    out = (y[0], y[1], shape[2] // 8, shape[3] // 8)
    return walk.add(_join(name, "upsample"), "resize", y, out, math.prod(out))


@_walk.register
def _(m: FeatureFusion, shapes: Tuple[Shape, Shape], walk: _Walk, name: str) -> Shape:
    spatial, context = shapes
    if spatial[0] != context[0] or spatial[2:] != context[2:]:
        raise ShapeError(f"fusion inputs disagree: spatial {spatial}, context {context}")
    N, _, H, W = spatial
    if m.style == "add":
        y = walk.elementwise(_join(name, "sum"), "add", spatial)
        return _walk(m.fuse, y, walk, _join(name, "fuse"))
    joined = (N, spatial[1] + context[1], H, W)
    if m.style == "concat":
        return _walk(m.fuse, joined, walk, _join(name, "fuse"))
    f = _walk(m.down, joined, walk, _join(name, "down"))
    with walk.retain(f):
        g = walk.add(_join(name, "pool"), "avg_pool", f, (N, f[1], 1, 1), math.prod(f))
        g = _walk(m.fc1, g, walk, _join(name, "fc1"))
        g = walk.elementwise(_join(name, "relu"), "relu", g)
        g = _walk(m.fc2, g, walk, _join(name, "fc2"))
        walk.elementwise(_join(name, "gate"), "sigmoid", g)
        walk.elementwise(_join(name, "scale"), "mul", f, input_parked=True)
        walk.elementwise(_join(name, "residual"), "add", f)
    return _walk(m.up, f, walk, _join(name, "up"))


@_walk.register
def _(m: Classifier, shape: Shape, walk: _Walk, name: str) -> Shape:
    y = _walk(m.ds, shape, walk, _join(name, "ds"))
    return _walk(m.cls, y, walk, _join(name, "cls"))


@_walk.register
def _(m: CanModel, shape: Shape, walk: _Walk, name: str) -> Shape:
    """Inference-mode cost: auxiliary heads are not part of the deployed network."""
    N, C, H, W = shape
    if C != m.config.input_channels:
        raise ShapeError(f"expected {m.config.input_channels} input channels, got {C}")
    _check_divisible(shape, 16, "can_forward")
    # the image stays live for the context branch; the spatial output waits for fusion
    with walk.retain(shape):
        sp = _walk(m.spatial, shape, walk, _join(name, "spatial"))
    with walk.hold(sp):
        ctx = _walk(m.context, shape, walk, _join(name, "context"))
    y = _walk(m.ffm, (sp, ctx), walk, _join(name, "ffm"))
    y = _walk(m.classifier, y, walk, _join(name, "classifier"))
    out = (N, y[1], H, W)
    return walk.add(_join(name, "upsample"), "resize", y, out, math.prod(out))


def profile(module: Module, input_shape: Sequence[int]) -> ComplexityReport:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 4 or any(s <= 0 for s in shape):
        raise ShapeError(f"input shape must be four positive extents, got {shape}")
    walk = _Walk()
    _walk(module, shape, walk, "")
    return ComplexityReport(input_shape=shape, rows=walk.rows, totals=walk.totals(), peak_activation_bytes=walk.peak)


def trace_costs(module: Module, input_shape: Sequence[int], seed: int = 0) -> CostTracer:
    """Run an inference forward on random input and collect the FLOPs every primitive reports."""
    data = np.random.default_rng(seed).standard_normal(tuple(input_shape)).astype(np.float32)
    was_training = module.training
    module.eval()
    try:
        with no_grad(), CostTracer() as tracer:
            module(Tensor(data))
    finally:
        module.train(was_training)
    return tracer


def attention_cost_ratio(h: int, w: int, embed: int, spp: SPPConfig) -> AttentionCost:
    """Affinity plus aggregation MAdds of dense attention (A keys) against SPP-reduced keys (M)."""
    if h <= 0 or w <= 0 or embed <= 0:
        raise ShapeError(f"attention extents must be positive, got {h}x{w}, embed {embed}")
    A, M = h * w, spp.positions
    dense = 2 * A * A * embed
    reduced = 2 * A * M * embed
    return AttentionCost(h=h, w=w, A=A, M=M, embed=embed, dense_madds=dense, reduced_madds=reduced, ratio=dense / reduced)


def attention_matmul_flops(ga: ReducedGlobalAttention, shape: Shape) -> int:
    """Counted FLOPs of the affinity and aggregation products alone."""
    walk = _Walk()
    _walk(ga, tuple(shape), walk, "")
    return sum(r.flops for r in walk.rows if r.kind == "matmul")


def attention_variant_costs(config: ModelConfig, input_shape: Sequence[int]) -> List[VariantCost]:
    """GA block cost at the 1/16 grid of `input_shape` as dense, SPP, and SPP with cheap operations."""
    N, _, H, W = input_shape
    grid = (N, config.context_channels, H // 16, W // 16)
    variants = (("dense", False, False), ("spp", True, False), ("spp+cheap", True, True))
    costs = []
    for name, use_spp, cheap in variants:
        ga = ReducedGlobalAttention(
            config.context_channels,
            config.ga_embed_channels,
            config.ga_value_channels,
            config.spp,
            config.ghost,
            groups=config.ga_groups,
            use_spp=use_spp,
            use_cheap_ops=cheap,
            rng=np.random.default_rng(config.seed),
        )
        walk = _Walk()
        _walk(ga, grid, walk, "ga")
        totals = walk.totals()
        costs.append(VariantCost(name=name, params=totals.params, flops=totals.flops))
    return costs


def ffm_variant_costs(config: ModelConfig, input_shape: Sequence[int]) -> List[VariantCost]:
    """Fusion cost at the 1/8 grid for every style the config's widths allow ('add' needs equal widths)."""
    N, _, H, W = input_shape
    spatial = (N, config.spatial_channels[3], H // 8, W // 8)
    context = (N, config.context_out_channels, H // 8, W // 8)
    costs = []
    for style in FUSION_STYLES:
        if style == "add" and spatial[1] != context[1]:
            logger.debug("skipping 'add' fusion: widths %d and %d differ", spatial[1], context[1])
            continue
        ffm = FeatureFusion(spatial[1], context[1], config.model_copy(update={"ffm_style": style}))
        walk = _Walk()
        _walk(ffm, (spatial, context), walk, "ffm")
        totals = walk.totals()
        costs.append(VariantCost(name=style, params=totals.params, flops=totals.flops))
    return costs


def _si(n: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(int(n))


def render_text(report: ComplexityReport) -> str:
    header = ("layer", "kind", "params", "flops", "madd", "out_shape", "act_bytes")
    body = [
        (r.name, r.kind, str(r.params), str(r.flops), str(r.madd), "x".join(map(str, r.out_shape)), str(r.activation_bytes))
        for r in report.rows
    ]
    t = report.totals
    body.append(("total", "", str(t.params), str(t.flops), str(t.madd), "", str(t.activation_bytes)))
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) if i < 2 else cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    lines.insert(len(lines) - 1, "-" * len(lines[0]))
    lines.append(
        f"input {'x'.join(map(str, report.input_shape))}: params {_si(t.params)}, FLOPs {_si(t.flops)}, "
        f"MAdd {_si(t.madd)}, peak activation {_si(report.peak_activation_bytes)}B"
    )
    return "\n".join(lines)


def render_json(report: ComplexityReport) -> str:
    return report.model_dump_json(indent=2)


def render_attention(cost: AttentionCost) -> str:
    return "\n".join(
        [
            f"GA grid {cost.h}x{cost.w}: A = {cost.A}, M = {cost.M}, embed = {cost.embed}",
            f"dense MAdds {cost.dense_madds}, reduced MAdds {cost.reduced_madds}",
            f"ratio ≈{cost.ratio:.1f}×",
        ]
    )
