"""F64 finite-difference checks over every primitive family, block and the full model."""

import logging
from contextlib import ExitStack
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from canseg.models.schemas import GhostConvConfig, GradCheckRow, InvertedResidualConfig, ModelConfig, OhemConfig, SPPConfig
from canseg.nn.attention import LocalAttention, ReducedGlobalAttention
from canseg.nn.blocks import DSConv, GhostConv, InvertedResidual, SqueezeExcite
from canseg.nn.can import CanModel, FeatureFusion
from canseg.nn.module import BatchNorm2d, Module
from canseg.services.losses import joint_loss
from canseg.tensor import ops
from canseg.tensor.gradcheck import param_errors
from canseg.tensor.tensor import Precision, Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5

Case = Tuple[Callable[[], Tensor], List[Tensor], Optional[int]]


def tiny_model_config(seed: int = 0) -> ModelConfig:
    """Four classes, 32×32 inputs, a 2×2 attention grid."""
    blocks = [
        InvertedResidualConfig(in_channels=8, expand_channels=16, out_channels=8, kernel=3, stride=2, use_se=True),
        InvertedResidualConfig(in_channels=8, expand_channels=24, out_channels=12, kernel=3, stride=2),
        InvertedResidualConfig(
            in_channels=12, expand_channels=24, out_channels=16, kernel=5, stride=2, use_se=True, activation="hard_swish"
        ),
        InvertedResidualConfig(
            in_channels=16, expand_channels=32, out_channels=16, kernel=5, stride=1, use_se=True, activation="hard_swish"
        ),
    ]
    return ModelConfig(
        num_classes=4,
        spatial_channels=[8, 8, 8, 8],
        stem_channels=8,
        backbone=blocks,
        ga_embed_channels=8,
        ga_value_channels=16,
        spp=SPPConfig(scales=[1, 2]),
        context_out_channels=8,
        ffm_mid_channels=8,
        ffm_out_channels=16,
        seed=seed,
    )


def _weighted_sum(rng: np.random.Generator, make: Callable[[], Tensor]) -> Callable[[], Tensor]:
    """Scalar probe sum(out * R) with a fixed random R, so every output entry matters."""
    shape = make().shape
    weights = Tensor(rng.standard_normal(shape))
    return lambda: ops.sum(ops.mul(make(), weights))


def _input(rng: np.random.Generator, shape, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


def _module_case(rng: np.random.Generator, module: Module, shape, max_entries: Optional[int] = None) -> Case:
    module.astype(Precision.F64)
    x = _input(rng, shape)
    return _weighted_sum(rng, lambda: module(x)), [x] + module.parameters(), max_entries


def build_cases(seed: int) -> Dict[str, Callable[[], Case]]:
    rng = np.random.default_rng(seed)

    def conv_dense() -> Case:
        x, w, b = _input(rng, (2, 4, 7, 6)), _input(rng, (6, 4, 3, 3)), _input(rng, (1, 6, 1, 1))
        return _weighted_sum(rng, lambda: ops.conv2d(x, w, b, stride=2, padding=1)), [x, w, b], None

    def conv_depthwise() -> Case:
        x, w = _input(rng, (2, 4, 6, 6)), _input(rng, (4, 1, 3, 3))
        return _weighted_sum(rng, lambda: ops.conv2d(x, w, None, stride=1, padding=1, groups=4)), [x, w], None

    def conv_grouped() -> Case:
        x, w = _input(rng, (1, 4, 5, 5)), _input(rng, (6, 2, 3, 3))
        return _weighted_sum(rng, lambda: ops.conv2d(x, w, None, stride=1, padding=1, groups=2)), [x, w], None

    def batch_norm() -> Case:
        return _module_case(rng, BatchNorm2d(3), (4, 3, 3, 3))

    def activations() -> Case:
        x = _input(rng, (2, 3, 4, 4))

        def f() -> Tensor:
            return ops.concat([ops.relu(x), ops.sigmoid(x), ops.hard_sigmoid(x), ops.hard_swish(x)], axis=1)

        return _weighted_sum(rng, f), [x], None

    def matmul_softmax() -> Case:
        a, b = _input(rng, (1, 2, 3, 4)), _input(rng, (1, 2, 4, 5))
        return _weighted_sum(rng, lambda: ops.softmax(ops.matmul(a, b))), [a, b], None

    def pooling_resize() -> Case:
        x = _input(rng, (1, 2, 7, 5))

        def f() -> Tensor:
            pooled = ops.adaptive_max_pool2d(x, 3, 2)
            return ops.add(ops.bilinear_resize(pooled, 7, 5), ops.global_avg_pool(x))

        return _weighted_sum(rng, f), [x], None

    def layout() -> Case:
        x = _input(rng, (1, 4, 2, 3))

        def f() -> Tensor:
            y = ops.permute(ops.reshape(x, (1, 2, 4, 3)), (0, 1, 3, 2))
            return ops.reshape(ops.gather_channels(ops.reshape(y, (1, 4, 3, 2)), [3, 0, 0, 2]), (1, 4, 2, 3))

        return _weighted_sum(rng, f), [x], None

    def cross_entropy() -> Case:
        logits = _input(rng, (2, 3, 3, 3))
        labels = rng.integers(0, 3, size=(2, 3, 3))
        labels[0, 0, 0] = 255
        return (lambda: ops.mean(ops.pixel_cross_entropy(logits, labels))), [logits], None

    def ds_conv() -> Case:
        return _module_case(rng, DSConv(4, 6, 3, stride=2, rng=rng), (2, 4, 6, 6))

    def squeeze_excite() -> Case:
        return _module_case(rng, SqueezeExcite(8, rng=rng), (2, 8, 3, 3))

    def ghost_conv() -> Case:
        return _module_case(rng, GhostConv(4, GhostConvConfig(out_channels=6, ratio=2), rng=rng), (1, 4, 4, 4))

    def inverted_residual() -> Case:
        cfg = InvertedResidualConfig(
            in_channels=4, expand_channels=8, out_channels=4, kernel=3, stride=1, use_se=True, activation="hard_swish"
        )
        return _module_case(rng, InvertedResidual(cfg, rng=rng), (2, 4, 4, 4))

    def reduced_ga() -> Case:
        ga = ReducedGlobalAttention(6, 4, 6, SPPConfig(scales=[1, 2]), GhostConvConfig(), rng=rng)
        ga.out_proj.weight.data[...] = rng.standard_normal(ga.out_proj.weight.shape) * 0.1
        return _module_case(rng, ga, (1, 6, 4, 4))

    def local_attention() -> Case:
        return _module_case(rng, LocalAttention(4, rng=rng), (2, 4, 4, 4))

    def feature_fusion() -> Case:
        ffm = FeatureFusion(4, 4, tiny_model_config(seed), rng=rng)
        ffm.astype(Precision.F64)
        spatial, context = _input(rng, (2, 4, 4, 4)), _input(rng, (2, 4, 4, 4))
        return _weighted_sum(rng, lambda: ffm(spatial, context)), [spatial, context] + ffm.parameters(), None

    def joint() -> Case:
        model = CanModel(tiny_model_config(seed)).astype(Precision.F64)
        out_proj = model.context.ga.out_proj.weight
        out_proj.data[...] = rng.standard_normal(out_proj.shape) * 0.1
        x = _input(rng, (1, 3, 32, 32), requires_grad=False)
        labels = rng.integers(0, 4, size=(1, 32, 32))
        cfg = OhemConfig(prob_threshold=1.0)
        return (lambda: joint_loss(model(x), labels, cfg)[0]), model.parameters(), 3

    return {
        "conv2d": conv_dense,
        "conv2d_depthwise": conv_depthwise,
        "conv2d_grouped": conv_grouped,
        "batch_norm": batch_norm,
        "activations": activations,
        "matmul_softmax": matmul_softmax,
        "pool_resize": pooling_resize,
        "layout": layout,
        "cross_entropy": cross_entropy,
        "ds_conv": ds_conv,
        "squeeze_excite": squeeze_excite,
        "ghost_conv": ghost_conv,
        "inverted_residual": inverted_residual,
        "reduced_global_attention": reduced_ga,
        "local_attention": local_attention,
        "feature_fusion": feature_fusion,
        "can_model": joint,
    }


def run_suite(seed: int = 0, corrupt: Optional[str] = None, blocks: Optional[List[str]] = None) -> List[GradCheckRow]:
    """Max relative error per block; `corrupt` scales one primitive's backward rule as a negative control."""
    cases = build_cases(seed)
    rows = []
    with ExitStack() as stack:
        if corrupt:
            stack.enter_context(ops.corrupt_backward(corrupt))
        for name, make in cases.items():
            if blocks and name not in blocks:
                continue
            f, params, max_entries = make()
            errors = param_errors(f, params, step=STEP, max_entries=max_entries, rng=np.random.default_rng(seed))
            worst = max(errors) if errors else 0.0
            rows.append(GradCheckRow(block=name, max_rel_error=worst, passed=worst < TOLERANCE))
            logger.debug("gradcheck %s: %.3e", name, worst)
    return rows


def render_rows(rows: List[GradCheckRow]) -> str:
    width = max(len(r.block) for r in rows)
    lines = [f"{'block'.ljust(width)}  max_rel_error  status"]
    for r in rows:
        lines.append(f"{r.block.ljust(width)}  {r.max_rel_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
