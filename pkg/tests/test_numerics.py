import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from drht import numerics as nx
from drht.gradcheck import check_gradients
from oracles import naive_conv2d, naive_mse, zero_stuff_transpose


def T(a, grad=False):
    return nx.Tensor(a, requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self, f64):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = nx.conv2d(T(x), T(np.ones((1, 1, 1, 1))), T(np.zeros(1)))
        npt.assert_array_equal(out.data, x)

    def test_box_filter_on_constant(self, f64):
        x = np.full((1, 1, 6, 6), 2.5)
        out = nx.conv2d(T(x), T(np.full((1, 1, 3, 3), 1 / 9)), T(np.zeros(1)))
        npt.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 2.5, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_loop_oracle(self, f64, rng, stride):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = nx.conv2d(T(x), T(w), T(b), stride)
        npt.assert_allclose(out.data, naive_conv2d(x, w, b, stride), rtol=0, atol=1e-12)

    def test_output_size(self, f64):
        out = nx.conv2d(T(np.zeros((2, 3, 8, 6))), T(np.zeros((4, 3, 5, 5))), T(np.zeros(4)), 2)
        assert out.shape == (2, 4, 4, 3)

    def test_channel_mismatch(self, f64):
        with pytest.raises(nx.ShapeError, match="channels"):
            nx.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))), T(np.zeros(1)))

    def test_even_kernel_rejected(self, f64):
        with pytest.raises(nx.ShapeError):
            nx.conv2d(T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 2, 2))), T(np.zeros(1)))

    def test_linearity(self, f64, rng):
        x, y = rng.standard_normal((2, 1, 2, 7, 6))
        w = rng.standard_normal((3, 2, 5, 5))
        zb = T(np.zeros(3))
        lhs = nx.conv2d(T(1.5 * x - 0.7 * y), T(w), zb, 2).data
        rhs = 1.5 * nx.conv2d(T(x), T(w), zb, 2).data - 0.7 * nx.conv2d(T(y), T(w), zb, 2).data
        npt.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


class TestConvTranspose:
    def test_unit_kernel_identity(self, f64, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1
        out = nx.conv2d_transpose(T(x), T(w), T(np.zeros(2)), 1)
        npt.assert_array_equal(out.data, x)

    def test_zero_stuffing_oracle(self, f64, rng):
        x = rng.standard_normal((1, 1, 2, 2))
        w = rng.standard_normal((1, 1, 3, 3))
        b = np.array([0.3])
        out = nx.conv2d_transpose(T(x), T(w), T(b), 2)
        assert out.shape == (1, 1, 4, 4)
        npt.assert_allclose(out.data, zero_stuff_transpose(x, w, b, 2), rtol=0, atol=1e-12)

    def test_zero_stuffing_oracle_multichannel(self, f64, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        w = rng.standard_normal((3, 2, 5, 5))
        b = rng.standard_normal(2)
        out = nx.conv2d_transpose(T(x), T(w), T(b), 2)
        npt.assert_allclose(out.data, zero_stuff_transpose(x, w, b, 2), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("shape,k,stride", [
        ((1, 2, 6, 6), 3, 1), ((2, 3, 8, 4), 3, 2), ((1, 2, 10, 6), 5, 2), ((1, 3, 9, 9), 9, 1),
    ])
    def test_adjoint_identity(self, f64, rng, shape, k, stride):
        n, cin, h, w_ = shape
        cout = 4
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, cin, k, k))
        y_shape = (n, cout, (h - 1) // stride + 1, (w_ - 1) // stride + 1)
        if h % stride or w_ % stride:
            pytest.skip("transpose output must be stride x input")
        y = rng.standard_normal(y_shape)
        fwd = nx.conv2d(T(x), T(w), T(np.zeros(cout)), stride).data
        adj = nx.conv2d_transpose(T(y), T(w), T(np.zeros(cin)), stride).data
        assert abs(np.vdot(fwd, y) - np.vdot(x, adj)) < 1e-10 * max(1.0, abs(np.vdot(fwd, y)))

    def test_channel_mismatch(self, f64):
        with pytest.raises(nx.ShapeError, match="channels"):
            nx.conv2d_transpose(T(np.zeros((1, 2, 4, 4))), T(np.zeros((3, 1, 3, 3))), T(np.zeros(1)), 2)


class TestElementwise:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (2.5, 2.5), (-1.0, math.exp(-1) - 1)])
    def test_elu_values(self, f64, x, expected):
        assert nx.elu(T([x])).data[0] == pytest.approx(expected, abs=1e-15)

    def test_elu_minus_one(self, f64):
        assert nx.elu(T([-1.0])).data[0] == pytest.approx(-0.6321, abs=1e-4)

    def test_clamp_subgradient(self, f64):
        x = T([-1.0, 0.5, 2.0], grad=True)
        loss = nx.mse(nx.clamp(x, 0.0, 1.0), np.zeros(3))
        loss.backward()
        npt.assert_array_equal(x.grad, [0.0, 0.5 / 3, 0.0])

    def test_mixed_precision_rejected(self):
        with nx.precision(64):
            a = T([1.0])
        with nx.precision(32):
            b = T([1.0])
        with pytest.raises(TypeError, match="mixed precision"):
            nx.add(a, b)

    def test_log_requires_positive(self, f64):
        with pytest.raises(ValueError):
            nx.log(T([0.0]))


class TestMse:
    def test_equal_is_zero(self, f64, rng):
        a = rng.random(10)
        assert nx.mse(T(a), a).item() == 0.0

    def test_uniform_offset(self, f64):
        a = np.full(12, 0.3)
        assert nx.mse(T(a + 0.1), a).item() == pytest.approx(0.005, abs=1e-15)

    def test_matches_sum_oracle(self, f64, rng):
        a, b = rng.standard_normal((2, 3, 4, 5))
        assert abs(nx.mse(T(a), b).item() - naive_mse(a, b)) < 1e-12

    def test_shape_mismatch(self, f64):
        with pytest.raises(nx.ShapeError):
            nx.mse(T(np.zeros(3)), np.zeros(4))


class TestBatchnorm:
    def test_standardized_input_passes_through(self, f64, rng):
        x = rng.standard_normal((4, 2, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        st_ = nx.BatchNormState.fresh(2)
        out = nx.batchnorm(T(x), T(np.ones(2)), T(np.zeros(2)), st_, train=True)
        npt.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12, atol=1e-12)

    def test_zero_gamma_gives_beta(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        beta = np.array([0.5, -1.0, 2.0])
        out = nx.batchnorm(T(x), T(np.zeros(3)), T(beta), nx.BatchNormState.fresh(3), train=True)
        npt.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))

    def test_output_statistics(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
        out = nx.batchnorm(T(x), T(np.ones(3)), T(np.zeros(3)), nx.BatchNormState.fresh(3), train=True).data
        npt.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        # epsilon shrinks the variance by var / (var + eps)
        var = x.var(axis=(0, 2, 3))
        npt.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), atol=1e-12)
        npt.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_running_stats_update(self, f64, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        st_ = nx.BatchNormState.fresh(1)
        nx.batchnorm(T(x), T(np.ones(1)), T(np.zeros(1)), st_, train=True)
        npt.assert_allclose(st_.running_mean, 0.01 * x.mean(), rtol=1e-12)
        npt.assert_allclose(st_.running_var, 0.99 + 0.01 * x.var(), rtol=1e-12)

    def test_infer_uses_running_stats(self, f64):
        st_ = nx.BatchNormState(np.array([2.0]), np.array([4.0]))
        out = nx.batchnorm(T(np.full((1, 1, 1, 1), 4.0)), T([1.0]), T([0.0]), st_, train=False)
        assert out.data.item() == pytest.approx(2 / math.sqrt(4 + 1e-5), rel=1e-14)

    def test_single_element_population_rejected(self, f64):
        with pytest.raises(ValueError, match="at least 2"):
            nx.batchnorm(T(np.zeros((1, 2, 1, 1))), T(np.ones(2)), T(np.zeros(2)),
                         nx.BatchNormState.fresh(2), train=True)


class TestBackward:
    def test_scalar_square(self, f64):
        x = T([3.0], grad=True)
        nx.mse(x, np.zeros(1)).backward()
        assert x.grad[0] == 3.0

    def test_backward_without_graph(self, f64):
        with pytest.raises(nx.GraphError):
            T(1.0, grad=True).backward()

    def test_non_scalar_loss(self, f64):
        x = T(np.ones(3), grad=True)
        with pytest.raises(nx.GraphError):
            nx.scale(x, 2.0).backward()

    def test_gradients_accumulate(self, f64):
        x = T([2.0], grad=True)
        nx.mse(x, np.zeros(1)).backward()
        nx.mse(x, np.zeros(1)).backward()
        assert x.grad[0] == 4.0

    def test_shared_node_sums_paths(self, f64):
        x = T([2.0], grad=True)
        y = nx.add(x, x)
        nx.mse(y, np.zeros(1)).backward()
        assert x.grad[0] == 8.0


def _fd(build, tensors, rng, count=40):
    errs = check_gradients(build, tensors, count=count, rng=rng)
    assert errs.max() < 1e-4, errs.max()


class TestGradients:
    def test_conv2d(self, f64, rng):
        x = T(rng.standard_normal((2, 2, 6, 6)), True)
        w = T(rng.standard_normal((3, 2, 3, 3)), True)
        b = T(rng.standard_normal(3), True)
        t = rng.standard_normal((2, 3, 3, 3))
        _fd(lambda: nx.mse(nx.conv2d(x, w, b, 2), t), [x, w, b], rng)

    def test_conv2d_transpose(self, f64, rng):
        x = T(rng.standard_normal((2, 3, 3, 3)), True)
        w = T(rng.standard_normal((3, 2, 5, 5)), True)
        b = T(rng.standard_normal(2), True)
        t = rng.standard_normal((2, 2, 6, 6))
        _fd(lambda: nx.mse(nx.conv2d_transpose(x, w, b, 2), t), [x, w, b], rng)

    def test_elu(self, f64, rng):
        x = T(rng.standard_normal(30), True)
        t = rng.standard_normal(30)
        _fd(lambda: nx.mse(nx.elu(x), t), [x], rng)

    @pytest.mark.parametrize("train", [True, False])
    def test_batchnorm(self, f64, rng, train):
        x = T(rng.standard_normal((2, 3, 3, 3)), True)
        g = T(rng.random(3) + 0.5, True)
        b = T(rng.standard_normal(3), True)
        t = rng.standard_normal((2, 3, 3, 3))
        st_ = nx.BatchNormState(rng.standard_normal(3), rng.random(3) + 0.5)
        _fd(lambda: nx.mse(nx.batchnorm(x, g, b, st_, train), t), [x, g, b], rng)

    def test_elementwise_chain(self, f64, rng):
        x = T(rng.random(20) + 0.2, True)
        y = T(rng.standard_normal(20), True)
        t = rng.standard_normal(20)

        def build():
            h = nx.power(x, 2.2)
            h = nx.log(nx.add(h, 0.1))
            h = nx.sub(nx.add(nx.scale(h, 0.7), y), 0.05)
            return nx.mse(nx.clamp(h, -5.0, 5.0), t)

        _fd(build, [x, y], rng)

    def test_two_layer_conv_elu(self, f64, rng):
        x = rng.standard_normal((2, 2, 6, 6))
        w1 = T(rng.standard_normal((3, 2, 3, 3)) * 0.5, True)
        b1 = T(rng.standard_normal(3), True)
        w2 = T(rng.standard_normal((2, 3, 3, 3)) * 0.5, True)
        b2 = T(rng.standard_normal(2), True)
        t = rng.standard_normal((2, 2, 6, 6))

        def build():
            h = nx.elu(nx.conv2d(T(x), w1, b1, 1))
            return nx.mse(nx.elu(nx.conv2d(h, w2, b2, 1)), t)

        _fd(build, [w1, b1, w2, b2], rng)

    def test_mse_second_argument(self, f64, rng):
        a = T(rng.standard_normal(5), True)
        b = T(rng.standard_normal(5), True)
        _fd(lambda: nx.mse(a, b), [a, b], rng, count=10)


class TestInvariants:
    def test_determinism_bit_identical(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
        runs = [nx.conv2d(T(x), T(w), T(np.zeros(4)), 2).data.tobytes() for _ in range(3)]
        assert len(set(runs)) == 1

    def test_nan_detection(self, f64):
        with pytest.raises(nx.NonFiniteError), np.errstate(over="ignore"):
            nx.scale(T([1e308]), 10.0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_elu_finite_and_bounded_below(self, values):
        with nx.precision(64):
            out = nx.elu(T(values)).data
        assert np.all(np.isfinite(out)) and np.all(out > -1 - 1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_adjoint_property(self, seed):
        r = np.random.default_rng(seed)
        with nx.precision(64):
            h, w_ = 2 * r.integers(1, 5), 2 * r.integers(1, 5)
            k = int(r.choice([1, 3, 5]))
            stride = int(r.integers(1, 3))
            x = r.standard_normal((1, 2, h, w_))
            w = r.standard_normal((3, 2, k, k))
            y = r.standard_normal((1, 3, h // stride, w_ // stride))
            fwd = nx.conv2d(T(x), T(w), T(np.zeros(3)), stride).data
            adj = nx.conv2d_transpose(T(y), T(w), T(np.zeros(2)), stride).data
        assert abs(np.vdot(fwd, y) - np.vdot(x, adj)) < 1e-10 * max(1.0, abs(np.vdot(x, adj)))
