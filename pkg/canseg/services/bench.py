"""Wall-clock forward timing."""

import logging
import math
import time
from typing import Optional, Sequence

import numpy as np

from canseg.core.errors import ConfigError
from canseg.models.schemas import BenchReport
from canseg.nn.can import CanModel
from canseg.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q·n)-th smallest sample."""
    ordered = sorted(samples)
    return ordered[max(1, math.ceil(q * len(ordered))) - 1]


def summarize(samples_ms: Sequence[float], height: int, width: int, warmup: int) -> BenchReport:
    median = float(np.median(samples_ms))
    return BenchReport(
        height=height,
        width=width,
        warmup=warmup,
        samples_ms=list(samples_ms),
        median_ms=median,
        p95_ms=nearest_rank(samples_ms, 0.95),
        fps=1000.0 / median if median > 0 else math.inf,
    )


def bench(model: CanModel, height: int, width: int, iters: int = 10, warmup: int = 2, seed: Optional[int] = 0) -> BenchReport:
    if iters < 1:
        raise ConfigError(f"iters must be at least 1, got {iters}", path="iters")
    data = np.random.default_rng(seed).random((1, model.config.input_channels, height, width), dtype=np.float32)
    x = Tensor(data.astype(model.dtype))
    model.eval()
    samples = []
    with no_grad():
        for i in range(warmup + iters):
            start = time.perf_counter()
            model(x)
            elapsed = (time.perf_counter() - start) * 1000.0
            if i >= warmup:
                samples.append(elapsed)
    report = summarize(samples, height, width, warmup)
    logger.info("bench %dx%d: median %.2f ms, p95 %.2f ms", height, width, report.median_ms, report.p95_ms)
    return report


def render_bench(report: BenchReport) -> str:
    return "\n".join(
        [
            f"input {report.height}x{report.width}, warmup {report.warmup}, timed runs {len(report.samples_ms)}",
            f"median {report.median_ms:.3f} ms, p95 {report.p95_ms:.3f} ms, {report.fps:.2f} FPS",
            f"note: {report.note}",
        ]
    )
