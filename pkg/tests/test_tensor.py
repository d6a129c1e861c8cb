"""Tensor engine, operators and the finite-difference harness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv2d, naive_conv_transpose2d
from drawergan import functional as F
from drawergan import tensor as T
from drawergan.gradcheck import finite_diff_check
from drawergan.tensor import GradientError, Tensor, backward, grad


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_mode(self, f64):
        assert Tensor([1.0]).dtype == np.float64

    def test_float_arrays_keep_their_dtype(self):
        assert Tensor(np.zeros(3, np.float64)).dtype == np.float64

    def test_shape_matches_data(self, rng):
        t = Tensor(rng.normal(size=(2, 3, 4)))
        assert t.size == int(np.prod(t.shape)) == 24

    def test_item_requires_single_element(self):
        assert Tensor([[3.0]]).item() == 3.0
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_debug_mode_catches_non_finite(self):
        with T.debug_mode(), np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError):
                T.log(Tensor([-1.0]))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3)))

    def test_explicit_broadcast_backward_sums(self, f64):
        a = Tensor(np.ones((1, 3)), requires_grad=True)
        g = grad(T.tsum(T.broadcast_to(a, (4, 3))), a)
        np.testing.assert_array_equal(g.data, np.full((1, 3), 4.0))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad.data, np.ones((3, 4)))

    def test_zero_times_x_gives_zero_grad(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (x * 0.0).sum().backward()
        np.testing.assert_array_equal(x.grad.data, np.zeros(5))

    def test_second_backward_is_stale(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GradientError):
            loss.backward()

    def test_retain_graph_allows_repeat_and_accumulates(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        loss = (x * 2.0).sum()
        loss.backward(retain_graph=True)
        loss.backward()
        np.testing.assert_allclose(x.grad.data, np.full(3, 4.0))

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(GradientError):
            backward(x * 2.0)

    def test_fan_out_accumulates(self, f64):
        # x used by three ops: d/dx (x*x + 3x) = 2x + 3
        x = Tensor(np.array([0.5, -2.0]), requires_grad=True)
        y = T.mul(x, x) + x * 3.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad.data, 2 * x.data + 3)

    def test_reverse_tape_order(self):
        tape = T.current_tape()
        x = Tensor(np.ones(2), requires_grad=True)
        with tape.tracing() as visited:
            a = T.exp(x)
            b = T.tanh(a)
            c = T.tsum(b)
            c.backward()
        assert visited == ["sum", "tanh", "exp"]

    def test_grad_does_not_touch_dot_grad(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        g = grad((x * x).sum(), x)
        assert x.grad is None
        np.testing.assert_allclose(g.data, 2 * x.data, rtol=1e-6)

    def test_unreached_input_gets_zeros(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = Tensor(rng.normal(size=2), requires_grad=True)
        gx, gy = grad((x * 2.0).sum(), [x, y])
        np.testing.assert_array_equal(gy.data, np.zeros(2))

    def test_higher_order(self, f64):
        x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
        g = grad(T.tsum(T.mul(T.mul(x, x), x)), x, create_graph=True)
        gg = grad(T.tsum(g), x)
        np.testing.assert_allclose(gg.data, 6 * x.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_shape_law_of_grad(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        F.conv2d(x, w, None, 2, 1).sum().backward()
        assert x.grad.shape == x.shape and w.grad.shape == w.shape


class TestConv2d:
    def test_ones_kernel_over_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                       Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1) and out.item() == 9.0

    def test_dilated_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), dilation=2)
        assert out.shape == (1, 1, 1, 1) and out.item() == 9.0

    def test_matches_nested_loop_oracle(self, rng, f64):
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 4, 4))
        out = F.conv2d(Tensor(x), Tensor(w), None, 2, 1)
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, 2, 1), atol=1e-6)

    def test_dilated_matches_oracle(self, rng, f64):
        x, w = rng.normal(size=(1, 2, 9, 9)), rng.normal(size=(3, 2, 3, 3))
        out = F.conv2d(Tensor(x), Tensor(w), None, 1, 2, 2)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, 1, 2, 2), atol=1e-9)

    def test_channel_mismatch(self, rng):
        with pytest.raises(F.DimensionError):
            F.conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(rng.normal(size=(1, 3, 3, 3))))

    def test_too_small_input(self, rng):
        with pytest.raises(F.GeometryError):
            F.conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(rng.normal(size=(1, 1, 3, 3))))

    @pytest.mark.parametrize("k", [1, 3, 4])
    @pytest.mark.parametrize("s", [1, 2])
    @pytest.mark.parametrize("p", [0, 1, 2])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_shape_law_sweep(self, k, s, p, d):
        H = 11
        x = Tensor(np.ones((1, 1, H, H)))
        out = F.conv2d(x, Tensor(np.ones((2, 1, k, k))), None, s, p, d)
        expect = (H + 2 * p - d * (k - 1) - 1) // s + 1
        assert out.shape == (1, 2, expect, expect)
        tr = F.conv_transpose2d(out, Tensor(np.ones((2, 1, k, k))), None, s, p, d)
        assert tr.shape[2] == (expect - 1) * s - 2 * p + d * (k - 1) + 1

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 6, 6))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        lhs = F.conv2d(Tensor(1.5 * x - 0.7 * y), w, None, 1, 1)
        rhs = 1.5 * F.conv2d(Tensor(x), w, None, 1, 1).data - 0.7 * F.conv2d(Tensor(y), w, None, 1, 1).data
        np.testing.assert_allclose(lhs.data, rhs, atol=1e-5)


class TestConvTranspose:
    def test_single_pixel_scatter(self):
        out = F.conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 4, 4))), None, 2, 1)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_zero_input_gives_bias(self, rng):
        b = rng.normal(size=3)
        out = F.conv_transpose2d(Tensor(np.zeros((2, 2, 3, 3))), Tensor(rng.normal(size=(2, 3, 4, 4))),
                                 Tensor(b), 2, 1)
        np.testing.assert_allclose(out.data, np.broadcast_to(b[None, :, None, None], out.shape), rtol=1e-6)

    def test_matches_scatter_oracle(self, rng, f64):
        x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 2, 4, 4))
        out = F.conv_transpose2d(Tensor(x), Tensor(w), None, 2, 1)
        np.testing.assert_allclose(out.data, naive_conv_transpose2d(x, w, 2, 1), atol=1e-9)

    def test_is_input_adjoint_of_conv(self, rng, f64):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = rng.normal(size=(4, 3, 4, 4))
        g = rng.normal(size=(2, 4, 4, 4))
        y = F.conv2d(x, Tensor(w), None, 2, 1)
        gx = grad(y, x, grad_output=Tensor(g))
        tr = F.conv_transpose2d(Tensor(g), Tensor(w), None, 2, 1, output_size=(8, 8))
        np.testing.assert_allclose(gx.data, tr.data, atol=1e-6)

    def test_stride_one_equals_full_conv_with_flipped_kernel(self, rng, f64):
        x, w = rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        tr = F.conv_transpose2d(Tensor(x), Tensor(w), None, 1, 0)
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        full = F.conv2d(Tensor(x), Tensor(flipped), None, 1, 2)
        np.testing.assert_allclose(tr.data, full.data, atol=1e-9)

    def test_inconsistent_output_size(self, rng):
        with pytest.raises(F.GeometryError):
            F.conv_transpose2d(Tensor(rng.normal(size=(1, 1, 4, 4))), Tensor(rng.normal(size=(1, 1, 4, 4))),
                               None, 2, 1, output_size=(3, 3))


class TestLayers:
    def test_instance_norm_constant_input(self):
        out = F.instance_norm(Tensor(np.full((1, 2, 4, 4), 3.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_instance_norm_statistics(self, rng, f64):
        out = F.instance_norm(Tensor(rng.normal(2.0, 3.0, size=(2, 3, 4, 4)))).data
        assert np.abs(out.mean(axis=(2, 3))).max() < 1e-6
        var = out.var(axis=(2, 3))
        assert np.all((var >= 1 - 1e-3) & (var <= 1))

    def test_instance_norm_fixed_point(self, rng, f64):
        x = rng.normal(size=(1, 2, 8, 8))
        x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
        out = F.instance_norm(Tensor(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + F.NORM_EPS), rtol=1e-9)

    def test_activations(self):
        assert F.activation(Tensor([0.0]), "tanh").item() == 0.0
        assert F.activation(Tensor([-1.0]), "relu").item() == 0.0
        assert F.activation(Tensor([-1.0]), "leaky_relu").item() == pytest.approx(-0.2)
        assert F.activation(Tensor([-1.5]), "linear").item() == -1.5

    def test_tanh_gradient(self, f64):
        x = Tensor(np.array([0.5]), requires_grad=True)
        g = grad(T.tsum(T.tanh(x)), x).item()
        assert g == pytest.approx(1 - np.tanh(0.5) ** 2, abs=1e-6)

    def test_fully_connected_cases(self, rng, f64):
        x = rng.normal(size=(2, 3))
        assert np.array_equal(F.fully_connected(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
        b = rng.normal(size=4)
        out = F.fully_connected(Tensor(x), Tensor(np.zeros((3, 4))), Tensor(b)).data
        np.testing.assert_array_equal(out, np.tile(b, (2, 1)))
        w = rng.normal(size=(3, 4))
        oracle = np.array([[sum(x[i, k] * w[k, j] for k in range(3)) for j in range(4)] for i in range(2)])
        np.testing.assert_allclose(F.fully_connected(Tensor(x), Tensor(w)).data, oracle, atol=1e-12)
        with pytest.raises(F.DimensionError):
            F.fully_connected(Tensor(x), Tensor(np.zeros((4, 2))))

    def test_concat_slice_roundtrip(self, rng):
        a, b = Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(rng.normal(size=(2, 2, 3, 3)))
        c = F.concat_channels([a, b])
        assert c.shape[1] == 3
        assert np.array_equal(F.slice_channels(c, 0, 1).data, a.data)
        assert np.array_equal(F.slice_channels(c, 1, 3).data, b.data)
        assert F.slice_channels(c, 0, 3) is c
        with pytest.raises(IndexError):
            F.slice_channels(c, 2, 5)

    def test_slice_gradient_window(self, f64, rng):
        x = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
        g = grad(T.tsum(F.slice_channels(x, 1, 3)), x).data
        assert np.all(g[:, 1:3] == 1) and np.all(g[:, [0, 3]] == 0)

    def test_gram_cases(self, rng, f64):
        np.testing.assert_allclose(F.gram_matrix(Tensor(np.ones((1, 1, 3, 5)))).data, [[[1.0]]])
        assert not F.gram_matrix(Tensor(np.zeros((1, 2, 2, 2)))).data.any()
        f = rng.normal(size=(1, 2, 2, 2))
        flat = f.reshape(2, 4)
        oracle = np.array([[np.dot(flat[i], flat[j]) for j in range(2)] for i in range(2)]) / 8
        g = F.gram_matrix(Tensor(f)).data[0]
        np.testing.assert_allclose(g, oracle, atol=1e-12)
        assert np.array_equal(g, g.T)
        assert np.linalg.eigvalsh(g).min() >= -1e-9

    def test_cross_entropy_cases(self, rng, f64):
        assert F.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item() == pytest.approx(np.log(4))
        logits = np.zeros((1, 3))
        logits[0, 1] = 100.0
        assert F.softmax_cross_entropy(Tensor(logits), [1]).item() < 1e-8
        z = rng.normal(size=(3, 5))
        labels = [4, 0, 2]
        oracle = np.mean([-z[i, l] + np.log(np.exp(z[i]).sum()) for i, l in enumerate(labels)])
        assert F.softmax_cross_entropy(Tensor(z), labels).item() == pytest.approx(oracle, abs=1e-6)
        with pytest.raises(IndexError):
            F.softmax_cross_entropy(Tensor(z), [0, 5, 1])

    def test_reduce_cases(self, rng, f64):
        assert F.reduce(Tensor([-1.0, 1.0, -1.0, 1.0]), "l1_mean").item() == 1.0
        assert F.reduce(Tensor(np.zeros(4)), "l2_norm").item() == pytest.approx(0.0, abs=1e-5)
        x = Tensor(rng.normal(size=6), requires_grad=True)
        g = grad(F.reduce(x, "l2_norm"), x).data
        np.testing.assert_allclose(g, x.data / np.linalg.norm(x.data), atol=1e-5)


class TestFiniteDifference:
    def test_sum_of_squares(self, rng):
        assert finite_diff_check(lambda t: T.tsum(T.mul(t, t)), rng.normal(size=(3, 3))) < 1e-8

    def test_conv_tanh_composite(self, rng):
        w = rng.normal(size=(2, 3, 3, 3))

        def f(t):
            return T.tsum(T.tanh(F.conv2d(t, Tensor(w), None, 1, 1)))

        assert finite_diff_check(f, rng.normal(size=(1, 3, 5, 5))) < 1e-4

    def test_composite_parameters_at_coarse_eps(self, rng):
        # conv -> norm -> activation -> fc, every parameter, eps = 1e-3
        x = rng.normal(size=(2, 2, 5, 5))
        params = {
            "w": rng.normal(size=(3, 2, 3, 3)),
            "gamma": rng.normal(size=3),
            "fc": rng.normal(size=(3, 2)),
        }

        def loss(p):
            h = F.conv2d(Tensor(x), p["w"], None, 1, 1)
            h = T.leaky_relu(F.instance_norm(h, p["gamma"]))
            return T.tsum(T.tanh(F.fully_connected(F.global_avg_pool(h), p["fc"])))

        for name in params:
            def f(t, name=name):
                p = {k: Tensor(v) for k, v in params.items()}
                p[name] = t
                return loss(p)

            assert finite_diff_check(f, params[name], eps=1e-3) < 1e-4, name

    def test_corrupted_adjoint_detected(self, rng):
        def bad_square(a):
            return T.make(a.data ** 2, (a,), lambda g: (T.scale(T.mul(g, a), 2.5),), "bad_square")

        assert finite_diff_check(lambda t: T.tsum(bad_square(t)), rng.normal(size=4)) > 1e-2


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2), st.integers(1, 2),
           st.integers(6, 10), st.integers(0, 2**31 - 1))
    def test_adjoint_identity(self, k, cout, p, s, H, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, H, H))
        w = rng.normal(size=(cout, 2, k, k))
        y = F.conv2d(Tensor(x), Tensor(w), None, s, p).data
        g = rng.normal(size=y.shape)
        gx = F.conv_transpose2d(Tensor(g), Tensor(w), None, s, p, output_size=(H, H)).data
        # <conv(x), g> == <x, conv^T(g)>
        assert np.sum(y * g) == pytest.approx(np.sum(x * gx), rel=1e-4, abs=1e-3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_gram_symmetric_psd(self, c, hw, seed):
        f = np.random.default_rng(seed).normal(size=(2, c, hw, hw))
        g = F.gram_matrix(Tensor(f)).data.astype(np.float64)
        assert np.array_equal(g, g.transpose(0, 2, 1))
        assert np.linalg.eigvalsh(g).min() >= -1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_concat_slice_bit_exact(self, ca, cb, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, ca, 2, 2)), rng.normal(size=(2, cb, 2, 2))
        c = F.concat_channels([Tensor(a), Tensor(b)])
        assert np.array_equal(F.slice_channels(c, 0, ca).data, a)
        assert np.array_equal(F.slice_channels(c, ca, ca + cb).data, b)

    def test_determinism(self, rng):
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        a = F.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        b = F.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        assert a.tobytes() == b.tobytes()
