"""Forward values of the NCHW primitives and their finite-difference gradients."""

import math

import numpy as np
import pytest

from canseg.core.errors import ConfigError, NumericError, ShapeError
from canseg.tensor import Tensor, grad_check
from canseg.tensor import ops
from canseg.tensor.tensor import CostTracer


def conv_loop(x, w, stride, padding):
    """Direct six-loop cross-correlation, groups = 1."""
    N, C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum()
    return out


def weighted_sum(rng, make):
    weights = Tensor(rng.standard_normal(make().shape))
    return lambda: ops.sum(ops.mul(make(), weights))


def matmul_loop(a, b):
    N, G, P, Q = a.shape
    R = b.shape[3]
    out = np.zeros((N, G, P, R))
    for n in range(N):
        for g in range(G):
            for p in range(P):
                for r in range(R):
                    out[n, g, p, r] = sum(a[n, g, p, q] * b[n, g, q, r] for q in range(Q))
    return out


def max_pool_loop(x, out_h, out_w):
    """Bin i spans rows floor(i·H/out_h) to ceil((i+1)·H/out_h), exclusive."""
    N, C, H, W = x.shape
    out = np.empty((N, C, out_h, out_w))
    for n in range(N):
        for c in range(C):
            for i in range(out_h):
                for j in range(out_w):
                    r0, r1 = math.floor(i * H / out_h), math.ceil((i + 1) * H / out_h)
                    c0, c1 = math.floor(j * W / out_w), math.ceil((j + 1) * W / out_w)
                    out[n, c, i, j] = max(x[n, c, r, s] for r in range(r0, r1) for s in range(c0, c1))
    return out


def resize_loop(x, out_h, out_w, align_corners):
    """Per-pixel bilinear blend of the four neighbours of each source coordinate."""

    def source(k, n_out, n_in):
        if align_corners:
            return k * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        return max((k + 0.5) * n_in / n_out - 0.5, 0.0)

    N, C, H, W = x.shape
    out = np.empty((N, C, out_h, out_w))
    for i in range(out_h):
        sy = source(i, out_h, H)
        y0 = min(math.floor(sy), H - 1)
        y1, fy = min(y0 + 1, H - 1), sy - y0
        for j in range(out_w):
            sx = source(j, out_w, W)
            x0 = min(math.floor(sx), W - 1)
            x1, fx = min(x0 + 1, W - 1), sx - x0
            top = (1 - fx) * x[:, :, y0, x0] + fx * x[:, :, y0, x1]
            bottom = (1 - fx) * x[:, :, y1, x0] + fx * x[:, :, y1, x1]
            out[:, :, i, j] = (1 - fy) * top + fy * bottom
    return out


class TestConv2d:
    """Convolution forward and backward."""

    def test_identity_kernel(self, rng):
        """A centred one-hot 3×3 kernel with padding 1 copies the input."""
        x = rng.standard_normal((1, 1, 3, 3))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, x)

    def test_all_ones(self):
        """Ones kernel over a ones image without padding sums nine taps."""
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        """Random 1×2×4×4 input against the direct loop."""
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv_loop(x, w, stride, padding), atol=1e-12)

    def test_depthwise_matches_per_channel(self, rng):
        """groups = C convolves every channel with its own kernel."""
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=3)
        for c in range(3):
            expected = conv_loop(x[:, c:c + 1], w[c:c + 1], 1, 1)
            np.testing.assert_allclose(out.data[:, c:c + 1], expected, atol=1e-12)

    def test_bias_broadcast(self):
        """Bias is added per output channel."""
        b = Tensor(np.array([1.0, -2.0]).reshape(1, 2, 1, 1))
        out = ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((2, 1, 1, 1))), b)
        np.testing.assert_array_equal(out.data[0, :, 0, 0], [1.0, -2.0])

    def test_groups_must_divide(self):
        """Indivisible groups are rejected."""
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), groups=2)

    def test_kernel_too_large(self):
        """A kernel that does not fit is rejected."""
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("groups,cin,cout", [(1, 4, 6), (2, 4, 6), (4, 4, 4)])
    def test_gradients(self, rng, groups, cin, cout):
        """Analytic conv gradients match central differences."""
        x = Tensor(rng.standard_normal((2, cin, 5, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((cout, cin // groups, 3, 3)), requires_grad=True)
        f = weighted_sum(rng, lambda: ops.conv2d(x, w, stride=2, padding=1, groups=groups))
        assert grad_check(f, [x, w]) < 1e-4

    def test_flop_count(self):
        """1×1 conv 8 → 16 on 4×4 counts 2048 FLOPs and twice that in MAdds."""
        with CostTracer() as tracer:
            ops.conv2d(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((16, 8, 1, 1))))
        assert tracer.flops == 2048
        assert tracer.madd == 4096


class TestMatmulSoftmax:
    """Batched products and last-axis softmax."""

    def test_identity(self, rng):
        """Multiplying by I₂ is a no-op."""
        a = rng.standard_normal((1, 1, 3, 2))
        out = ops.matmul(Tensor(a), Tensor(np.eye(2).reshape(1, 1, 2, 2)))
        np.testing.assert_allclose(out.data, a)

    def test_small_product(self):
        """[[1, 2]]·[[3], [4]] = 11."""
        out = ops.matmul(Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2)), Tensor(np.array([3.0, 4.0]).reshape(1, 1, 2, 1)))
        assert out.item() == 11.0

    @pytest.mark.parametrize("seed", range(100))
    def test_matmul_matches_loop_oracle(self, seed):
        """Random batch, group and inner extents against the nested-loop product."""
        rng = np.random.default_rng(seed)
        N, G, P, Q, R = (int(v) for v in rng.integers(1, 5, size=5))
        a = rng.standard_normal((N, G, P, Q))
        b = rng.standard_normal((N, G, Q, R))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), atol=1e-12)

    def test_misaligned(self):
        """Inner extents must agree."""
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.zeros((1, 1, 2, 3))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_softmax_uniform(self):
        """Equal logits split evenly."""
        out = ops.softmax(Tensor(np.zeros((1, 1, 1, 2))))
        np.testing.assert_allclose(out.data.reshape(-1), [0.5, 0.5])

    def test_softmax_large_logit_is_stable(self):
        """Max subtraction keeps [1000, 0] finite."""
        out = ops.softmax(Tensor(np.array([1000.0, 0.0]).reshape(1, 1, 1, 2)))
        np.testing.assert_allclose(out.data.reshape(-1), [1.0, 0.0], atol=1e-12)

    def test_softmax_known_values(self):
        """softmax([1, 2, 3])."""
        out = ops.softmax(Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_allclose(out.data.reshape(-1), [0.09003, 0.24473, 0.66524], atol=1e-5)

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_shift_invariant(self, seed):
        """Adding a per-row constant, however large, leaves the distribution unchanged."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 4, 5))
        shift = rng.uniform(-500.0, 500.0, size=(2, 3, 4, 1))
        np.testing.assert_allclose(ops.softmax(Tensor(x + shift)).data, ops.softmax(Tensor(x)).data, atol=1e-10)

    def test_softmax_rejects_nan(self):
        """Non-finite input raises NumericError."""
        with pytest.raises(NumericError):
            ops.softmax(Tensor(np.array([np.nan, 0.0]).reshape(1, 1, 1, 2)))

    def test_gradients(self, rng):
        """softmax(a·b) gradients."""
        a = Tensor(rng.standard_normal((2, 2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2, 4, 5)), requires_grad=True)
        assert grad_check(weighted_sum(rng, lambda: ops.softmax(ops.matmul(a, b))), [a, b]) < 1e-4


class TestPoolResize:
    """Adaptive max pooling, global average pooling, bilinear resize."""

    def test_max_pool_quadrants(self):
        """0..15 on 4×4 pooled to 2×2 picks each quadrant's maximum."""
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(ops.adaptive_max_pool2d(x, 2, 2).data[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_global(self):
        """A 5×5 map pooled to 1×1 is its maximum."""
        x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
        assert ops.adaptive_max_pool2d(x, 1, 1).item() == 24.0

    def test_max_pool_equal_extent_is_identity(self, rng):
        """Pooling to the input extent changes nothing."""
        x = rng.standard_normal((1, 2, 3, 4))
        np.testing.assert_array_equal(ops.adaptive_max_pool2d(Tensor(x), 3, 4).data, x)

    def test_max_pool_overlapping_bins(self):
        """5 rows into 3 bins: [0,2), [1,4), [3,5)."""
        x = Tensor(np.arange(5, dtype=np.float64).reshape(1, 1, 5, 1))
        np.testing.assert_array_equal(ops.adaptive_max_pool2d(x, 3, 1).data.reshape(-1), [1, 3, 4])

    @pytest.mark.parametrize("seed", range(100))
    def test_max_pool_matches_loop_oracle(self, seed):
        """Random extents and bin counts, overlapping bins included."""
        rng = np.random.default_rng(seed)
        H, W = (int(v) for v in rng.integers(1, 10, size=2))
        out_h, out_w = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
        x = rng.standard_normal((int(rng.integers(1, 3)), 2, H, W))
        np.testing.assert_array_equal(ops.adaptive_max_pool2d(Tensor(x), out_h, out_w).data, max_pool_loop(x, out_h, out_w))

    def test_max_pool_too_large(self):
        """Output larger than input is rejected."""
        with pytest.raises(ShapeError):
            ops.adaptive_max_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 3)

    def test_global_avg_pool(self):
        """Channel means."""
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
        np.testing.assert_allclose(ops.global_avg_pool(x).data.reshape(-1), [1.5, 5.5])

    def test_resize_constant(self):
        """A constant map stays constant at any size."""
        out = ops.bilinear_resize(Tensor(np.full((1, 2, 3, 5), 7.0)), 8, 11)
        np.testing.assert_allclose(out.data, 7.0)

    @pytest.mark.parametrize("align_corners", [False, True])
    def test_resize_identity(self, rng, align_corners):
        """Equal extents reproduce the input."""
        x = rng.standard_normal((1, 2, 4, 6))
        out = ops.bilinear_resize(Tensor(x), 4, 6, align_corners=align_corners)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_resize_matches_loop_oracle(self, seed):
        """Up- and downsampling in both corner conventions against per-pixel interpolation."""
        rng = np.random.default_rng(seed)
        H, W = (int(v) for v in rng.integers(1, 7, size=2))
        out_h, out_w = (int(v) for v in rng.integers(1, 13, size=2))
        align_corners = bool(seed % 2)
        x = rng.standard_normal((1, 2, H, W))
        out = ops.bilinear_resize(Tensor(x), out_h, out_w, align_corners=align_corners)
        np.testing.assert_allclose(out.data, resize_loop(x, out_h, out_w, align_corners), atol=1e-12)

    def test_resize_rows_sum_to_one(self):
        """Interpolation weights form a partition of unity."""
        for out_size, in_size in [(8, 2), (3, 7), (16, 16)]:
            m = ops.interpolation_matrix(out_size, in_size, align_corners=False)
            np.testing.assert_allclose(m.sum(axis=1), 1.0)

    def test_gradients(self, rng):
        """Pooling and resize gradients."""
        x = Tensor(rng.standard_normal((1, 2, 7, 5)), requires_grad=True)

        def make():
            pooled = ops.adaptive_max_pool2d(x, 3, 2)
            return ops.add(ops.bilinear_resize(pooled, 7, 5), ops.global_avg_pool(x))

        assert grad_check(weighted_sum(rng, make), [x]) < 1e-4


class TestBatchNorm:
    """Per-channel normalisation."""

    def params(self, gamma, beta, mean, var):
        return [Tensor(np.full((1, 1, 1, 1), v)) for v in (gamma, beta, mean, var)]

    def test_inference_known_values(self):
        """[2, 4] with gamma 3, beta 1, mean 3, var 1, eps 0 gives [-2, 4]."""
        x = Tensor(np.array([2.0, 4.0]).reshape(1, 1, 1, 2))
        out = ops.batch_norm(x, *self.params(3.0, 1.0, 3.0, 1.0), eps=0.0, training=False)
        np.testing.assert_allclose(out.data.reshape(-1), [-2.0, 4.0])

    def test_training_normalises_and_updates_stats(self):
        """Batch statistics normalise; running stats move by momentum."""
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        gamma, beta, mean, var = self.params(1.0, 0.0, 0.0, 1.0)
        out = ops.batch_norm(x, gamma, beta, mean, var, eps=1e-12, training=True, momentum=0.5)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-5)
        assert mean.item() == pytest.approx(1.0)
        assert var.item() == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)

    def test_zero_eps_rejected_in_training(self):
        """Training with eps = 0 is refused."""
        x = Tensor(np.ones((2, 1, 1, 1)))
        with pytest.raises(ConfigError, match="eps"):
            ops.batch_norm(x, *self.params(1.0, 0.0, 0.0, 1.0), eps=0.0, training=True)

    def test_parameter_shape_checked(self):
        """gamma must be (1, C, 1, 1)."""
        x = Tensor(np.ones((1, 2, 1, 1)))
        with pytest.raises(ShapeError):
            ops.batch_norm(x, *self.params(1.0, 0.0, 0.0, 1.0))

    @pytest.mark.parametrize("training", [False, True])
    def test_gradients(self, rng, training):
        """Both modes pass the gradient check."""
        x = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        gamma = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        beta = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        mean, var = Tensor(np.zeros((1, 3, 1, 1))), Tensor(np.ones((1, 3, 1, 1)))
        f = weighted_sum(rng, lambda: ops.batch_norm(x, gamma, beta, mean, var, training=training, momentum=0.0))
        assert grad_check(f, [x, gamma, beta]) < 1e-4


class TestActivations:
    """Elementwise nonlinearities."""

    def test_relu(self):
        out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_array_equal(out.data.reshape(-1), [0.0, 0.0, 2.0])

    def test_hard_sigmoid(self):
        """Saturates at ±3, one half at zero."""
        out = ops.hard_sigmoid(Tensor(np.array([-3.0, 3.0, 0.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_allclose(out.data.reshape(-1), [0.0, 1.0, 0.5])

    def test_hard_swish(self):
        """hard_swish(1.5) = 1.125."""
        out = ops.hard_swish(Tensor(np.full((1, 1, 1, 1), 1.5)))
        assert out.item() == pytest.approx(1.125)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="gelu"):
            ops.activation(Tensor(np.zeros((1, 1, 1, 1))), "gelu")

    def test_gradients(self, rng):
        """All four activations, inputs kept off the kinks."""
        data = rng.uniform(-5, 5, size=(2, 3, 4, 4))
        data[np.abs(data) < 0.05] = 0.5
        data[np.abs(np.abs(data) - 3) < 0.05] = 1.0
        x = Tensor(data, requires_grad=True)

        def make():
            return ops.concat([ops.relu(x), ops.sigmoid(x), ops.hard_sigmoid(x), ops.hard_swish(x)], axis=1)

        assert grad_check(weighted_sum(rng, make), [x]) < 1e-4


class TestLayout:
    """Reshape, permute, concat, gather."""

    def test_reshape_size_checked(self):
        with pytest.raises(ShapeError):
            ops.reshape(Tensor(np.zeros((1, 2, 2, 2))), (1, 1, 1, 7))

    def test_permute_round_trip(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        y = ops.permute(ops.permute(Tensor(x), (0, 2, 3, 1)), (0, 3, 1, 2))
        np.testing.assert_array_equal(y.data, x)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))], axis=1)

    def test_gather_repeats_channels(self):
        x = Tensor(np.arange(3, dtype=np.float64).reshape(1, 3, 1, 1))
        out = ops.gather_channels(x, [2, 0, 0])
        np.testing.assert_array_equal(out.data.reshape(-1), [2.0, 0.0, 0.0])

    def test_gradients(self, rng):
        """Layout ops route gradients, repeated gathers accumulate."""
        x = Tensor(rng.standard_normal((1, 4, 2, 3)), requires_grad=True)

        def make():
            y = ops.permute(ops.reshape(x, (1, 2, 4, 3)), (0, 1, 3, 2))
            gathered = ops.gather_channels(ops.reshape(y, (1, 4, 3, 2)), [3, 0, 0, 2])
            return ops.concat([gathered, ops.reshape(x, (1, 4, 3, 2))], axis=1)

        assert grad_check(weighted_sum(rng, make), [x]) < 1e-4


class TestPixelCrossEntropy:
    """Per-pixel softmax cross entropy."""

    def test_uniform_logits(self):
        """Equal logits over K classes cost log K."""
        out = ops.pixel_cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), np.int64))
        np.testing.assert_allclose(out.data, np.log(4.0))

    def test_ignored_pixels_are_zero(self):
        labels = np.array([[[0, 255]]])
        out = ops.pixel_cross_entropy(Tensor(np.zeros((1, 2, 1, 2))), labels)
        assert out.data[0, 0, 0, 1] == 0.0

    def test_out_of_range_label(self):
        with pytest.raises(ShapeError):
            ops.pixel_cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[5]]]))

    def test_gradients(self, rng):
        logits = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        labels = rng.integers(0, 3, size=(2, 3, 3))
        labels[0, 0, 0] = 255
        assert grad_check(lambda: ops.mean(ops.pixel_cross_entropy(logits, labels)), [logits]) < 1e-4
