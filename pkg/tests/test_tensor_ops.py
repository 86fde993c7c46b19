import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sadnet import tensor as T
from sadnet.errors import ConfigurationError, UsageError
from sadnet.tensor import Tensor

from oracles import conv2d_reference, conv2d_transpose_reference


class TestConv2d:
    def test_sum_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = T.conv2d(x, w)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 7)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.conv2d(x, Tensor(w))
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_loop_reference(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal((1, 4, 1, 1))
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=(1, 1))
        ref = conv2d_reference(x, w, b, padding=(1, 1))
        np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-9)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ConfigurationError, match=r"2 channels.*expects 3"):
            T.conv2d(x, w)

    def test_empty_output_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        with pytest.raises(ConfigurationError, match="empty"):
            T.conv2d(x, w)

    def test_linearity_in_input(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        z = rng.standard_normal((1, 2, 6, 6))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        a, b = 1.7, -0.4
        lhs = T.conv2d(Tensor(a * x + b * z), w, padding=(1, 1)).data
        rhs = (a * T.conv2d(Tensor(x), w, padding=(1, 1)).data
               + b * T.conv2d(Tensor(z), w, padding=(1, 1)).data)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_property_matches_reference(self, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
        n = data.draw(st.integers(1, 2))
        c = data.draw(st.integers(1, 3))
        o = data.draw(st.integers(1, 3))
        k = data.draw(st.integers(1, 3))
        stride = data.draw(st.integers(1, 2))
        dil = data.draw(st.integers(1, 4))
        pad = data.draw(st.integers(0, 4))
        span = dil * (k - 1) + 1
        h = data.draw(st.integers(max(1, span - 2 * pad), 8))
        w_dim = data.draw(st.integers(max(1, span - 2 * pad), 8))
        x = rng.standard_normal((n, c, h, w_dim))
        w = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal((1, o, 1, 1))
        out_h = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
        out_w = (w_dim + 2 * pad - dil * (k - 1) - 1) // stride + 1
        if out_h < 1 or out_w < 1:
            return
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), (stride, stride),
                     (dil, dil), (pad, pad))
        ref = conv2d_reference(x, w, b, (stride, stride), (dil, dil), (pad, pad))
        np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-9)


class TestConvTranspose:
    def test_disjoint_blocks(self):
        x = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = T.conv2d_transpose(Tensor(x), w, stride=(2, 2))
        assert y.shape == (1, 1, 4, 4)
        expected = np.kron(x[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(y.data[0, 0], expected)

    def test_down_up_restores_spatial_size(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 12, 16)))
        wd = Tensor(rng.standard_normal((8, 4, 2, 2)))
        wu = Tensor(rng.standard_normal((4, 8, 2, 2)))
        down = T.conv2d(x, wd, stride=(2, 2))
        assert down.shape == (1, 8, 6, 8)
        up = T.conv2d_transpose(down, wu, stride=(2, 2))
        assert up.shape == (1, 4, 12, 16)

    def test_matches_scatter_reference(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((4, 3, 2, 2))
        b = rng.standard_normal((1, 4, 1, 1))
        y = T.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), (2, 2))
        ref = conv2d_transpose_reference(x, w, b, (2, 2))
        np.testing.assert_allclose(y.data, ref, rtol=1e-6, atol=1e-9)

    def test_channel_mismatch(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        w = Tensor(rng.standard_normal((1, 3, 2, 2)))
        with pytest.raises(ConfigurationError, match="mismatch"):
            T.conv2d_transpose(x, w)

    def test_input_gradient_is_conv2d(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 2, 2)))
        y = T.conv2d_transpose(x, w, stride=(2, 2))
        proj = rng.standard_normal(y.shape)
        T.tensor_sum(T.mul(y, Tensor(proj))).backward()
        # adjoint: grad_x = conv2d(proj, w) with the same kernel and stride,
        # channel axes swapped to map output channels back to input channels
        w_adj = Tensor(w.data.transpose(1, 0, 2, 3))
        ref = T.conv2d(Tensor(proj), w_adj, stride=(2, 2)).data
        np.testing.assert_allclose(x.grad, ref, rtol=1e-6, atol=1e-12)


class TestPointwise:
    def test_leaky_relu_definition(self):
        x = Tensor(np.array(-1.0).reshape(1, 1, 1, 1))
        assert T.leaky_relu(x, 0.2).item() == pytest.approx(-0.2)
        x = Tensor(np.array(3.0).reshape(1, 1, 1, 1))
        assert T.leaky_relu(x, 0.2).item() == 3.0

    def test_sigmoid_symmetry(self):
        assert T.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5

    def test_concat_channel_arithmetic(self, rng):
        a = Tensor(rng.standard_normal((1, 32, 16, 16)))
        b = Tensor(rng.standard_normal((1, 64, 16, 16)))
        assert T.concat_channels(a, b).shape == (1, 96, 16, 16)

    def test_concat_mismatch(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 4, 4)))
        b = Tensor(rng.standard_normal((1, 2, 5, 4)))
        with pytest.raises(ConfigurationError):
            T.concat_channels(a, b)

    def test_add_mul_shape_mismatch(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 4, 4)))
        b = Tensor(rng.standard_normal((1, 2, 4, 5)))
        with pytest.raises(ConfigurationError):
            T.add(a, b)
        with pytest.raises(ConfigurationError):
            T.mul(a, b)

    def test_crop_or_pad(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        cropped = T.crop_or_pad(x, 3, 4)
        np.testing.assert_array_equal(cropped.data, x.data[:, :, :3, :4])
        padded = T.crop_or_pad(x, 7, 6)
        assert padded.shape == (1, 2, 7, 6)
        np.testing.assert_array_equal(padded.data[:, :, :5, :5], x.data)
        assert np.all(padded.data[:, :, 5:, :] == 0)


class TestLoss:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        assert T.loss("L1", Tensor(x), Tensor(x.copy())).item() == 0.0
        assert T.loss("L2", Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_constant_offset(self, rng):
        t = rng.standard_normal((1, 2, 4, 4))
        p = t + 2.0
        assert T.loss("L1", Tensor(p), Tensor(t)).item() == pytest.approx(2.0)
        assert T.loss("L2", Tensor(p), Tensor(t)).item() == pytest.approx(4.0)

    def test_matches_scalar_loop(self, rng):
        p = rng.standard_normal((2, 3, 5, 5))
        t = rng.standard_normal((2, 3, 5, 5))
        l1 = l2 = 0.0
        for a, b in zip(p.reshape(-1), t.reshape(-1)):
            l1 += abs(a - b)
            l2 += (a - b) ** 2
        n = p.size
        assert T.loss("L1", Tensor(p), Tensor(t)).item() == pytest.approx(l1 / n, abs=1e-9)
        assert T.loss("L2", Tensor(p), Tensor(t)).item() == pytest.approx(l2 / n, abs=1e-9)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            T.loss("L2", Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    def test_unknown_kind(self):
        x = Tensor(np.zeros((1, 1, 1, 1)))
        with pytest.raises(UsageError):
            T.loss("huber", x, x)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        T.tensor_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(UsageError):
            T.leaky_relu(x).backward()

    def test_detached_absent_from_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        frozen = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=False)
        T.tensor_sum(T.mul(x, frozen)).backward()
        assert x.grad is not None
        assert frozen.grad is None

    def test_conv_weight_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        t = Tensor(rng.standard_normal((1, 2, 3, 3)))

        def f():
            return T.loss("L2", T.conv2d(x, w), t)

        f().backward()
        g = w.grad.copy()
        h = 1e-3
        flat = w.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(g.reshape(-1)[i] - fd) < 1e-4 * max(abs(fd), 1e-6) + 1e-6

    def test_backward_deterministic(self, rng):
        data = rng.standard_normal((1, 2, 6, 6))
        wdata = rng.standard_normal((3, 2, 3, 3))
        grads = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            w = Tensor(wdata.copy(), requires_grad=True)
            T.loss("L2", T.conv2d(x, w, padding=(1, 1)),
                   Tensor(np.zeros((1, 3, 6, 6)))).backward()
            grads.append((x.grad.copy(), w.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])
