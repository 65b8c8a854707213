"""Oracle-equivalence battery run by `canseg selftest`."""

import logging
from typing import Callable, List, Tuple

import numpy as np

from canseg.core.errors import ChecksumError
from canseg.models.schemas import GhostConvConfig, ModelConfig, OhemConfig, SelfTestResult, SPPConfig, TrainSchedule
from canseg.nn.attention import ReducedGlobalAttention
from canseg.nn.blocks import GhostConv, spp_flatten
from canseg.nn.can import CanModel, SpatialBranch
from canseg.nn.module import Conv2d
from canseg.services import complexity, imageio, weights
from canseg.services.gradcheck_suite import tiny_model_config
from canseg.services.losses import joint_loss, ohem_ce
from canseg.services.optim import poly_lr
from canseg.tensor import ops
from canseg.tensor.tensor import Precision, Tensor, no_grad

logger = logging.getLogger(__name__)

Check = Callable[[], Tuple[bool, str]]
CHECKS: List[Tuple[str, Check]] = []
EXIT_CAP = 125


def check(name: str):
    def register(fn: Check) -> Check:
        CHECKS.append((name, fn))
        return fn

    return register


def dense_attention_reference(ga: ReducedGlobalAttention, x: Tensor) -> np.ndarray:
    """Non-local attention over every position, from the block's own projections."""
    N, _, h, w = x.shape
    A = h * w
    q = ga.query(x).data.reshape(N, ga.embed, A)
    k = ga.key(x).data.reshape(N, ga.embed, A)
    v = ga.value(x).data.reshape(N, ga.value_channels, A)
    s = np.einsum("nea,neb->nab", q, k)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    s /= s.sum(axis=-1, keepdims=True)
    return np.einsum("nvb,nab->nva", v, s).reshape(N, ga.value_channels, h, w)


@check("spp positions M = 110 for the default scales")
def _spp_positions():
    x = Tensor(np.arange(2 * 8 * 8, dtype=np.float32).reshape(1, 2, 8, 8))
    M = spp_flatten(x, SPPConfig()).shape[3]
    return SPPConfig().positions == 110 and M == 110, f"M = {M}"


@check("attention saving 2048/110 for a 64x32 grid")
def _attention_ratio():
    cost = complexity.attention_cost_ratio(64, 32, 32, SPPConfig())
    return round(cost.ratio, 1) == 18.6 and cost.A == 2048 and cost.M == 110, f"ratio {cost.ratio:.3f}"


@check("lossless SPP equals dense non-local attention")
def _lossless_spp():
    worst = 0.0
    for case in range(20):
        n = (4, 8)[case % 2]
        rng = np.random.default_rng(case)
        ga = ReducedGlobalAttention(8, 4, 6, SPPConfig(scales=[n]), GhostConvConfig(), rng=rng).astype(Precision.F64)
        x = Tensor(rng.standard_normal((1, 8, n, n)))
        with no_grad():
            aggregated, _ = ga.attend(x)
            reference = dense_attention_reference(ga, x)
        worst = max(worst, float(np.abs(aggregated.data - reference).max()))
    return worst < 1e-5, f"max abs error {worst:.2e} over 20 cases"


@check("reduced GA FLOPs linear in A, dense quadratic")
def _flop_scaling():
    spp, ghost = SPPConfig(), GhostConvConfig()
    reduced = ReducedGlobalAttention(16, 8, 16, spp, ghost)
    dense = ReducedGlobalAttention(16, 8, 16, spp, ghost, use_spp=False)
    shapes = [(1, 16, 8, 8), (1, 16, 8, 16), (1, 16, 16, 16)]
    r = [complexity.attention_matmul_flops(reduced, s) for s in shapes]
    d = [complexity.attention_matmul_flops(dense, s) for s in shapes]
    ok = all(abs(r[i + 1] - 2 * r[i]) <= 1 and abs(d[i + 1] - 4 * d[i]) <= 1 for i in range(2))
    return ok, f"reduced {r}, dense {d}"


@check("spatial branch output stride 8")
def _spatial_stride():
    branch = SpatialBranch([4, 4, 4, 4])
    shapes = [(16, 16), (32, 48), (48, 32)]
    with no_grad():
        outs = [branch(Tensor(np.zeros((1, 3, h, w), np.float32))).shape[2:] for h, w in shapes]
    return all(o == (h // 8, w // 8) for o, (h, w) in zip(outs, shapes)), f"{outs}"


@check("profile totals match traced forward")
def _profile_trace():
    model = CanModel(tiny_model_config())
    report = complexity.profile(model, (1, 3, 32, 32))
    tracer = complexity.trace_costs(model, (1, 3, 32, 32))
    return report.totals.flops == tracer.flops and report.totals.madd == tracer.madd, (
        f"profile {report.totals.flops}, traced {tracer.flops}"
    )


@check("FFM bottleneck FLOPs below 0.6 of no-bottleneck")
def _ffm_economy():
    costs = {c.name: c.flops for c in complexity.ffm_variant_costs(ModelConfig(), (1, 3, 64, 64))}
    ratio = costs["concat_attention_bottleneck"] / costs["concat_attention"]
    return ratio < 0.6, f"ratio {ratio:.3f}"


@check("ghost conv cheaper than plain 1x1 conv")
def _ghost_economy():
    ghost = GhostConv(64, GhostConvConfig(out_channels=64, ratio=2))
    plain = Conv2d(64, 64, 1)
    g = complexity.profile(ghost, (1, 64, 8, 8)).totals
    p = complexity.profile(plain, (1, 64, 8, 8)).totals
    return g.params == 2336 and g.params < p.params and g.flops < p.flops, f"{g.params} vs {p.params} params"


@check("weight container round trip and CRC")
def _weights_roundtrip():
    model = CanModel(tiny_model_config())
    payload = weights.save_weights(model)
    restored = weights.load_weights(payload, model.config)
    same = all(np.array_equal(a.data, b.data) for a, b in zip(model.state_dict().values(), restored.state_dict().values()))
    corrupted = bytearray(payload)
    corrupted[len(corrupted) // 2] ^= 0xFF
    try:
        weights.decode_container(bytes(corrupted))
        detected = False
    except ChecksumError:
        detected = True
    return same and detected, f"{len(payload)} bytes, corruption detected: {detected}"


@check("PPM round trip")
def _ppm_roundtrip():
    image = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    data = imageio.encode_ppm(image)
    return np.array_equal(imageio.decode_ppm(data), image) and imageio.encode_ppm(imageio.decode_ppm(data)) == data, ""


@check("poly LR fixture")
def _poly_lr():
    sched = TrainSchedule(base_lr=1.0, max_iter=1000)
    values = (poly_lr(0, sched), poly_lr(1000, sched), poly_lr(500, sched))
    return values[0] == 1.0 and values[1] == 0.0 and abs(values[2] - (1 - 0.5**0.9)) < 1e-6, f"{values}"


@check("joint loss additive, OHEM degenerates to CE")
def _loss_decomposition():
    rng = np.random.default_rng(3)
    model = CanModel(tiny_model_config()).astype(Precision.F64)
    x = Tensor(rng.standard_normal((2, 3, 32, 32)))
    labels = rng.integers(0, 4, size=(2, 32, 32))
    with no_grad():
        out = model(x)
        total, report = joint_loss(out, labels, OhemConfig())
        loss, _ = ohem_ce(out.primary_logits, labels, OhemConfig(prob_threshold=1.0, min_kept=labels.size))
        plain = ops.mean(ops.pixel_cross_entropy(out.primary_logits, labels)).item()
    additive = abs(report.total - (report.l_p + report.l_c1 + report.l_c2)) <= 1e-6 and abs(total.item() - report.total) <= 1e-5
    return additive and abs(loss.item() - plain) <= 1e-6, f"total {report.total:.6f}, ohem {loss.item():.6f}, ce {plain:.6f}"


def run_selftest() -> List[SelfTestResult]:
    results = []
    for name, fn in CHECKS:
        try:
            passed, detail = fn()
        except Exception as e:  # a crashing property is a failing property
            logger.debug("selftest %s raised", name, exc_info=True)
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(SelfTestResult(name=name, passed=bool(passed), detail=detail))
    return results


def exit_code(results: List[SelfTestResult]) -> int:
    return min(sum(not r.passed for r in results), EXIT_CAP)


def render_results(results: List[SelfTestResult]) -> str:
    return "\n".join(f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.detail})" if r.detail else "") for r in results)
