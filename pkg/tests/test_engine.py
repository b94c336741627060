import math

import numpy as np
import pytest

from multiquant.engine import (
    Adam,
    BackwardError,
    BatchNorm2d,
    NonFiniteError,
    SGDMomentum,
    ShapeError,
    Tensor,
    finite_diff_check,
    ops,
)
from multiquant.quantizer import QuantizerParams, fake_quantize


def param(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def central_diff(f, arr, eps=1e-6):
    """Plain numerical gradient of a numpy-valued function, independent of the engine's checker."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


class TestForward:
    def test_linear_identity(self):
        out = ops.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_conv_1x1_kernel_scales(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        out = ops.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, 2 * x)

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_names_the_op(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ShapeError, match="linear"):
            ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_forward_is_bitwise_deterministic(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))

        def run():
            return ops.relu(ops.conv2d(Tensor(x), Tensor(w), padding=1)).data

        assert np.array_equal(run(), run())

    def test_cross_entropy_uniform_logits_is_log_classes(self):
        for c in (2, 5, 10):
            loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, c))), np.array([0, 1, 1]))
            assert loss.item() == pytest.approx(math.log(c), abs=1e-14)

    def test_cross_entropy_nonnegative(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((50, 7)) * 5
        assert ops.softmax_cross_entropy(Tensor(z), rng.integers(0, 7, 50)).item() >= 0


class TestBatchNorm:
    def test_training_mode_standardizes(self):
        rng = np.random.default_rng(4)
        bn = BatchNorm2d(3)
        y = bn(Tensor(rng.normal(5, 3, (8, 3, 4, 4)))).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_eval_mode_is_fixed_affine(self):
        rng = np.random.default_rng(5)
        bn = BatchNorm2d(2)
        bn.running_mean[:] = [1.0, -2.0]
        bn.running_var[:] = [4.0, 0.25]
        bn.eval()
        x = rng.standard_normal((3, 2, 2, 2))
        expected = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(bn(Tensor(x)).data, expected, rtol=1e-14)
        before = bn.running_mean.copy()
        bn(Tensor(x))
        np.testing.assert_array_equal(bn.running_mean, before)

    def test_running_stats_momentum(self):
        bn = BatchNorm2d(1)
        x = np.arange(8, dtype=float).reshape(2, 1, 2, 2)
        bn(Tensor(x))
        assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = param([1.0, 2.0, 3.0])
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_relu_gradient(self):
        x = param([-1.0, 2.0])
        ops.sum(ops.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = param([0.0])
        ops.sum(ops.relu(x)).backward()
        assert x.grad[0] == 0.0

    def test_cross_entropy_gradient(self):
        z = param([0.0, 0.0])
        ops.softmax_cross_entropy(z, np.array([[1.0, 0.0]])).backward()
        np.testing.assert_allclose(z.grad, [-0.5, 0.5], atol=1e-15)

        def f():
            return ops.softmax_cross_entropy(Tensor(z.data), np.array([[1.0, 0.0]])).item()

        np.testing.assert_allclose(central_diff(f, z.data), [-0.5, 0.5], atol=1e-9)

    def test_gradients_accumulate_until_zeroed(self):
        x = param([1.0, 2.0])
        ops.sum(ops.scale(x, 3.0)).backward()
        ops.sum(ops.scale(x, 3.0)).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_backward_without_graph_rejected(self):
        with pytest.raises(BackwardError):
            Tensor(1.0).backward()

    def test_backward_needs_scalar(self):
        x = param([1.0, 2.0])
        with pytest.raises(BackwardError):
            ops.scale(x, 2.0).backward()

    def test_shared_subgraph_gradients_add(self):
        x = param([2.0])
        y = ops.relu(x)
        ops.sum(ops.add(y, y)).backward()
        np.testing.assert_array_equal(x.grad, [2.0])


def _smooth_net(rng):
    x = Tensor(rng.standard_normal((4, 2, 4, 4)))
    w = param(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = param(rng.standard_normal(3) * 0.1)
    bn = BatchNorm2d(3)
    bn.weight.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.bias.data[:] = rng.standard_normal(3) * 0.1
    fc = param(rng.standard_normal((5, 12)) * 0.3)
    labels = rng.integers(0, 5, 4)
    teacher = Tensor(rng.standard_normal((4, 5)))

    def loss():
        h = ops.relu(bn(ops.conv2d(x, w, b, padding=1)))
        h = ops.maxpool2d(h, 2)
        logits = ops.linear(ops.flatten(h), fc)
        return ops.add(ops.softmax_cross_entropy(logits, labels), ops.soft_cross_entropy(logits, teacher))

    return loss, [w, b, bn.weight, bn.bias, fc]


class TestFiniteDifferences:
    def test_linear_cross_entropy(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((5, 4)))
        w = param(rng.standard_normal((3, 4)))
        y = rng.integers(0, 3, 5)
        res = finite_diff_check(lambda: ops.softmax_cross_entropy(ops.linear(x, w), y), w, 1e-5)
        assert res.conclusive
        assert res.max_rel_error <= 1e-4

    def test_smooth_conv_bn_pool_graph(self):
        loss, params = _smooth_net(np.random.default_rng(7))
        for p in params:
            res = finite_diff_check(loss, p, 1e-5)
            assert res.passed(1e-4), (p.shape, res.max_rel_error)

    def test_constant_loss(self):
        w = param([1.0, 2.0])
        res = finite_diff_check(lambda: ops.add(ops.scale(ops.sum(w), 0.0), Tensor(3.0)), w, 1e-5)
        np.testing.assert_array_equal(res.analytic, 0)
        np.testing.assert_array_equal(res.numeric, 0)
        assert res.passed(1e-4)

    def test_soft_cross_entropy_both_arguments(self):
        rng = np.random.default_rng(8)
        s = param(rng.standard_normal((3, 4)))
        t = param(rng.standard_normal((3, 4)))
        for p in (s, t):
            assert finite_diff_check(lambda: ops.soft_cross_entropy(s, t), p, 1e-5).passed(1e-4)

    def test_ste_at_bin_midpoint_matches_surrogate(self):
        # b=2 weight grid over [-1, 1]: bins centred at codes 0..3 -> x_n in {0, 1/3, 2/3, 1};
        # x_n = 1/2 sits midway between codes 1 and 2 (a rounding edge), x_n = 1/3 is a bin centre.
        q = QuantizerParams(-1.0, 1.0, 2, "weight")
        w = param([[-1.0 / 3.0 + 1e-3, 0.2]])
        x = Tensor([[1.5, -0.7]])
        res = finite_diff_check(lambda: ops.sum(ops.linear(x, fake_quantize(w, q))), w, 1e-6)
        # exact surrogate derivative: d/dw of x * 2*((w+1)/2 - 0.5) = x
        np.testing.assert_allclose(res.analytic, [[1.5, -0.7]], rtol=1e-12)
        assert res.passed(1e-6)

    def test_all_skipped_is_inconclusive(self):
        q = QuantizerParams(-1.0, 1.0, 2, "weight")
        w = param([0.0])  # exactly on a rounding edge (x_n = 0.5)
        res = finite_diff_check(lambda: ops.sum(fake_quantize(w, q)), w, 1e-6)
        assert not res.conclusive
        assert not res.passed(1.0)


class TestOptimizers:
    def test_sgd_plain_step(self):
        p = param([1.0])
        p.grad[:] = 1.0
        SGDMomentum([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
        assert p.data[0] == pytest.approx(0.9)

    def test_sgd_momentum_step(self):
        p = param([1.0])
        opt = SGDMomentum([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        opt.velocity[0][:] = 1.0
        p.grad[:] = 1.0
        opt.step()
        assert opt.velocity[0][0] == pytest.approx(1.9)
        assert p.data[0] == pytest.approx(0.81)

    def test_sgd_stationary(self):
        p = param([0.3, -2.0])
        SGDMomentum([p], lr=0.1, momentum=0.9, weight_decay=0.0).step()
        np.testing.assert_array_equal(p.data, [0.3, -2.0])

    def test_adam_zero_gradient(self):
        p = param([0.5, -1.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_array_equal(p.data, [0.5, -1.0])

    def test_adam_first_and_second_step(self):
        p = param(0.0)
        opt = Adam([p], lr=0.1)
        p.grad[...] = 1.0
        opt.step()
        assert float(p.data) == pytest.approx(-0.1, rel=1e-6)
        opt.step()
        # m_hat = v_hat = 1 again, so the second step also has size lr
        assert float(p.data) == pytest.approx(-0.2, rel=1e-6)
        assert opt.step_count == 2

    def test_adam_rejects_nonfinite_gradient(self):
        p = param([1.0])
        p.grad[:] = np.nan
        with pytest.raises(NonFiniteError):
            Adam([p]).step()
