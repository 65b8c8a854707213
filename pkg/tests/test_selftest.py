"""Self-test registry and the gradient-check suite."""

import numpy as np
import pytest

from canseg.models.schemas import GhostConvConfig, GradCheckRow, SelfTestResult, SPPConfig
from canseg.nn.attention import ReducedGlobalAttention
from canseg.services import gradcheck_suite, selftest
from canseg.tensor.tensor import Precision, Tensor, no_grad


class TestSelftest:
    def test_dense_reference_matches_lossless_spp(self, rng):
        ga = ReducedGlobalAttention(8, 4, 6, SPPConfig(scales=[4]), GhostConvConfig(), rng=rng).astype(Precision.F64)
        x = Tensor(rng.standard_normal((1, 8, 4, 4)))
        with no_grad():
            aggregated, _ = ga.attend(x)
        np.testing.assert_allclose(aggregated.data, selftest.dense_attention_reference(ga, x), atol=1e-10)

    def test_exit_code_counts_failures(self):
        results = [SelfTestResult(name=str(i), passed=i % 2 == 0) for i in range(6)]
        assert selftest.exit_code(results) == 3
        assert selftest.exit_code([SelfTestResult(name="x", passed=False)] * 300) == 125

    def test_render(self):
        text = selftest.render_results([SelfTestResult(name="a", passed=True), SelfTestResult(name="b", passed=False, detail="d")])
        assert text.splitlines() == ["PASS  a", "FAIL  b  (d)"]

    @pytest.mark.parametrize("name", [n for n, _ in selftest.CHECKS])
    def test_each_check(self, name):
        fn = dict(selftest.CHECKS)[name]
        passed, detail = fn()
        assert passed, detail


class TestGradcheckSuite:
    def test_case_names(self):
        assert {"conv2d", "reduced_global_attention", "can_model"} <= set(gradcheck_suite.build_cases(0))

    @pytest.mark.parametrize("block", ["conv2d_grouped", "batch_norm", "cross_entropy", "ghost_conv", "local_attention"])
    def test_block_passes(self, block):
        (row,) = gradcheck_suite.run_suite(blocks=[block])
        assert row.passed, row

    def test_corruption_detected(self):
        (row,) = gradcheck_suite.run_suite(corrupt="matmul", blocks=["matmul_softmax"])
        assert not row.passed

    def test_render(self):
        text = gradcheck_suite.render_rows([GradCheckRow(block="conv2d", max_rel_error=1e-9, passed=True)])
        assert text.splitlines()[1].endswith("ok")

    @pytest.mark.slow
    def test_full_suite(self):
        assert all(row.passed for row in gradcheck_suite.run_suite())
