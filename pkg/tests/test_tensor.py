import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from rdae import tensor as T
from rdae.tensor import Parameter, RunningStats, Tensor

SEEDS = range(5)


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_oracle(x, w, b, stride, padding):
    """Cross-correlation via scipy, one (batch, output channel) pair at a time."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = []
    for n in range(x.shape[0]):
        maps = [correlate(xp[n], w[o], mode="valid")[0][::stride, ::stride] + b[o] for o in range(w.shape[0])]
        out.append(np.stack(maps))
    return np.stack(out)


class TestConv2d:
    def test_zero_input_gives_zero_output(self):
        w = np.random.default_rng(0).normal(size=(4, 1, 3, 3))
        y = T.conv2d(_t(np.zeros((1, 1, 3, 3))), _t(w), _t(np.zeros(4)), 1, 1)
        assert y.shape == (1, 4, 3, 3)
        assert np.all(y.data == 0)

    def test_scalar_arithmetic(self):
        y = T.conv2d(_t([[[[2.0]]]]), _t([[[[3.0]]]]), _t([0.5]), 1, 0)
        assert y.data.reshape(-1).tolist() == [6.5]

    def test_unit_kernel_is_exact_identity(self):
        x = np.random.default_rng(1).random((2, 1, 7, 7)).astype(np.float32)
        y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_array_equal(y.data, x)

    @pytest.mark.parametrize("k,stride,padding,size", [(3, 1, 1, 8), (3, 1, 0, 9), (5, 1, 2, 7),
                                                       (3, 2, 1, 8), (1, 1, 0, 6), (3, 1, 1, 20)])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_scipy_correlate(self, k, stride, padding, size, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, size, size))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        y = T.conv2d(_t(x), _t(w), _t(b), stride, padding)
        np.testing.assert_allclose(y.data, conv_oracle(x, w, b, stride, padding), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, k, stride, padding, seed):
        rng = np.random.default_rng(seed)
        probes = [rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)]
        err = T.grad_check(lambda x, w, b: T.conv2d(x, w, b, stride, padding), probes, eps=1e-3, seed=seed)
        assert err < 1e-4

    def test_large_map_gradient_uses_blocked_path(self):
        # 40x40 maps exceed the small-map threshold, exercising the per-tap GEMM route
        rng = np.random.default_rng(7)
        probes = [rng.normal(size=(1, 2, 40, 40)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        idx = [rng.choice(3200, 40, replace=False), None, None]
        err = T.grad_check(lambda x, w, b: T.conv2d(x, w, b, 1, 1), probes, indices=idx, seed=7)
        assert err < 1e-4

    @pytest.mark.parametrize("x_shape,w_shape,match", [
        ((1, 3, 8, 8), (4, 2, 3, 3), "C=3"),
        ((1, 3, 8, 8), (4, 3, 3, 5), "square"),
        ((1, 3, 8, 8), (4, 3, 2, 2), "odd"),
        ((1, 3, 2, 8), (4, 3, 5, 5), "height"),
        ((3, 8, 8), (4, 3, 3, 3), "4-D"),
    ])
    def test_shape_errors_name_the_dimension(self, x_shape, w_shape, match):
        with pytest.raises(T.ShapeError, match=match):
            T.conv2d(_t(np.zeros(x_shape)), _t(np.zeros(w_shape)), None, 1, 0)

    def test_bias_shape_checked(self):
        with pytest.raises(T.ShapeError, match="bias"):
            T.conv2d(_t(np.zeros((1, 1, 3, 3))), _t(np.zeros((2, 1, 1, 1))), _t(np.zeros(3)))


class TestRelu:
    def test_definition(self):
        assert T.relu(_t([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_positive_input_is_identity(self):
        x = _t(np.array([0.5, 1.0, 3.0]), grad=True)
        y = T.relu(x)
        T.weighted_sum(y, np.ones(3)).backward()
        assert y.data.tolist() == x.data.tolist()
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_subgradient_at_zero_is_zero(self):
        x = _t(np.array([0.0]), grad=True)
        T.weighted_sum(T.relu(x), np.ones(1)).backward()
        assert x.grad.tolist() == [0.0]

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4, 4))
        x[np.abs(x) < 1e-2] = 0.5
        assert T.grad_check(T.relu, [x], seed=seed) < 1e-4


class TestBatchNorm:
    @pytest.fixture
    def params(self):
        return Parameter(np.ones(3)), Parameter(np.zeros(3))

    def test_train_mode_normalizes(self, params):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 3, 5, 5)).astype(np.float32)
        y = T.batchnorm2d(Tensor(x), *params, training=True).data.astype(np.float64)
        assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(1).normal(size=(2, 2, 3, 3))
        y = T.batchnorm2d(_t(x), _t(np.zeros(2)), _t([0.25, -1.5]), training=True)
        assert np.all(y.data[:, 0] == 0.25) and np.all(y.data[:, 1] == -1.5)

    def test_running_stats_update(self):
        x = np.random.default_rng(2).normal(1.0, 3.0, size=(4, 2, 6, 6))
        stats = RunningStats.fresh(2)
        T.batchnorm2d(_t(x), _t(np.ones(2)), _t(np.zeros(2)), True, stats, momentum=0.1)
        n = 4 * 36
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1)
        np.testing.assert_allclose(stats.var, expected_var, rtol=1e-5)
        assert stats.tracked == 1

    def test_infer_mode_needs_initialized_stats(self, params):
        with pytest.raises(RuntimeError, match="running statistics"):
            T.batchnorm2d(_t(np.zeros((1, 3, 2, 2))), *params, training=False, stats=RunningStats.fresh(3))

    def test_train_mode_needs_two_values_per_channel(self, params):
        with pytest.raises(T.ShapeError):
            T.batchnorm2d(_t(np.zeros((1, 3, 1, 1))), *params, training=True)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_train_gradient(self, seed):
        rng = np.random.default_rng(seed)
        probes = [rng.normal(size=(3, 2, 4, 4)), rng.normal(1.0, 0.3, size=2), rng.normal(size=2)]
        err = T.grad_check(lambda x, g, b: T.batchnorm2d(x, g, b, training=True), probes, seed=seed)
        assert err < 1e-3

    @pytest.mark.parametrize("seed", SEEDS)
    def test_infer_gradient(self, seed):
        rng = np.random.default_rng(seed)
        stats = RunningStats(rng.normal(size=2).astype(np.float32), rng.uniform(0.5, 2, 2).astype(np.float32), 1)
        probes = [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)]
        err = T.grad_check(lambda x, g, b: T.batchnorm2d(x, g, b, training=False, stats=stats), probes, seed=seed)
        assert err < 1e-3


class TestUpsampleAddMse:
    def test_upsample_replicates(self):
        y = T.upsample_nearest2x(_t([[[[5.0]]]]))
        assert y.shape == (1, 1, 2, 2) and np.all(y.data == 5.0)

    def test_upsample_constant_stays_constant(self):
        y = T.upsample_nearest2x(_t(np.full((2, 3, 4, 4), 0.75)))
        assert y.shape == (2, 3, 8, 8) and np.all(y.data == 0.75)

    def test_upsample_layout(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float)
        np.testing.assert_array_equal(T.upsample_nearest2x(_t(x)).data[0, 0], expected)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample_gradient(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 3, 3, 4))
        assert T.grad_check(T.upsample_nearest2x, [x], seed=seed) < 1e-4

    def test_add_definition_and_identity(self):
        assert T.add(_t([1.0, 2.0]), _t([3.0, 4.0])).data.tolist() == [4.0, 6.0]
        a = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(T.add(_t(a), _t(np.zeros((2, 3)))).data, a)

    def test_add_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(_t(np.zeros(2)), _t(np.zeros(3)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_gradient(self, seed):
        rng = np.random.default_rng(seed)
        assert T.grad_check(T.add, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))], seed=seed) < 1e-6

    def test_mse_values(self):
        assert T.mse_loss(_t([1.0, 1.0]), _t([0.0, 2.0])).item() == 1.0
        a = _t(np.random.default_rng(0).normal(size=5))
        assert T.mse_loss(a, a).item() == 0.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.mse_loss(_t(np.zeros(2)), _t(np.zeros(3)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse_gradient(self, seed):
        rng = np.random.default_rng(seed)
        err = T.grad_check(T.mse_loss, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))], seed=seed)
        assert err < 1e-5


class TestOptimizers:
    def test_zero_gradient_is_fixed_point(self):
        p = Parameter(np.array([1.0, -2.0], np.float32))
        p.grad = np.zeros(2, np.float32)
        T.adam_step([p])
        assert p.data.tolist() == [1.0, -2.0]

    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([0.5], np.float64))
        p.grad = np.ones(1)
        T.adam_step([p], lr=0.001)
        assert p.data[0] == pytest.approx(0.5 - 0.001, abs=1e-9)
        assert p.grad is None or not np.any(p.grad)

    def test_non_finite_gradient_rejected_with_name(self):
        good, bad = Parameter(np.zeros(2)), Parameter(np.zeros(2))
        good.name, bad.name = "encoder.0.weight", "head.bias"
        good.grad = np.ones(2)
        bad.grad = np.array([1.0, np.nan])
        with pytest.raises(T.NonFiniteGradientError, match="head.bias"):
            T.adam_step([good, bad])
        assert good.data.tolist() == [0.0, 0.0]

    def test_adam_deterministic(self):
        def run():
            rng = T.RngState(3)
            p = Parameter(rng.normal(size=(4,)).astype(np.float32))
            for i in range(10):
                p.grad = rng.child(i).normal(size=(4,)).astype(np.float32)
                T.adam_step([p])
            return p.data.tobytes()

        assert run() == run()

    def test_sgd_step(self):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([2.0])
        T.sgd_step([p], lr=0.1)
        assert p.data[0] == pytest.approx(0.8)


class TestRngAndGraph:
    def test_rng_repeatable_and_keyed(self):
        a, b = T.RngState(42), T.RngState(42)
        np.testing.assert_array_equal(a.uniform(0, 1, 5), b.uniform(0, 1, 5))
        assert not np.array_equal(a.child(1).uniform(0, 1, 5), a.child(2).uniform(0, 1, 5))
        np.testing.assert_array_equal(a.child(1, 2).normal(size=3), b.child(1, 2).normal(size=3))

    def test_no_grad_records_nothing(self):
        x = _t([1.0, -1.0], grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad

    def test_gradients_accumulate_over_shared_inputs(self):
        x = _t([1.0, 2.0], grad=True)
        T.weighted_sum(T.add(x, x), np.ones(2)).backward()
        assert x.grad.tolist() == [2.0, 2.0]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16))
    def test_forward_ops_stay_finite(self, values):
        x = np.array(values, dtype=np.float32).reshape(1, 1, 1, -1)
        for y in (T.relu(Tensor(x)), T.upsample_nearest2x(Tensor(x)), T.add(Tensor(x), Tensor(x))):
            assert np.all(np.isfinite(y.data))
