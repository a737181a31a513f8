import numpy as np
import pytest

from dpkfac import nn
from dpkfac.errors import ContractError
from dpkfac.rng import Rng


def naive_conv2d(x, w, b, k, stride, pad):
    """Sliding-window convolution, the independent oracle for the im2col path."""
    bs, c_in, h, win = x.shape
    c_out = w.shape[0]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (win + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bs, c_out, ho, wo))
    for n in range(bs):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def mlp(dims, act="tanh", rng=None):
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        specs.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            specs.append(nn.Activation(act))
    return nn.Model.initialized(specs, rng or Rng(0))


class TestForward:
    def test_zero_weights_zero_logits(self):
        m = mlp([3, 4, 2])
        for i in m.trainable_ids:
            m.params[i][:] = 0.0
        logits, _ = nn.forward(m, Rng(0).standard_normal((5, 3)))
        np.testing.assert_array_equal(logits, np.zeros((5, 2)))

    def test_identity_linear(self):
        m = nn.Model([nn.Linear(2, 2, bias=False)], {0: np.eye(2)})
        logits, _ = nn.forward(m, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(logits, [[1.0, 2.0]])

    def test_conv_matches_naive(self):
        rng = Rng(3)
        spec = nn.Conv2d(2, 3, 3, stride=1, pad=0)
        m = nn.Model.initialized([spec], rng)
        x = rng.standard_normal((2, 2, 4, 4))
        logits, _ = nn.forward(m, x)
        w = m.params[0][:, :-1].reshape(3, 2, 3, 3)
        b = m.params[0][:, -1]
        want = naive_conv2d(x, w, b, 3, 1, 0)
        np.testing.assert_allclose(logits, want, atol=1e-10)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_matches_naive_strided(self, stride, pad):
        rng = Rng(stride * 10 + pad)
        spec = nn.Conv2d(1, 2, 3, stride=stride, pad=pad)
        m = nn.Model.initialized([spec], rng)
        x = rng.standard_normal((3, 1, 8, 8))
        logits, _ = nn.forward(m, x)
        w = m.params[0][:, :-1].reshape(2, 1, 3, 3)
        want = naive_conv2d(x, w, m.params[0][:, -1], 3, stride, pad)
        np.testing.assert_allclose(logits, want, atol=1e-10)

    def test_shape_mismatch_rejected(self):
        m = mlp([3, 2])
        with pytest.raises(ContractError):
            nn.forward(m, np.zeros((1, 4)))

    def test_tape_records_activations(self):
        m = mlp([3, 4, 2])
        _, tape = nn.forward(m, Rng(1).standard_normal((6, 3)))
        for i in m.trainable_ids:
            assert i in tape.acts
            assert tape.acts[i].shape[0] == 6


class TestLossCe:
    def test_uniform_logits_log_k(self):
        logits = np.zeros((4, 7))
        loss, _ = nn.loss_ce(logits, np.array([0, 1, 2, 3]))
        assert abs(loss - np.log(7)) <= 1e-12

    def test_two_class_dlogits(self):
        loss, d = nn.loss_ce(np.zeros((1, 2)), np.array([0]))
        np.testing.assert_allclose(d, [[-0.5, 0.5]])

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            nn.loss_ce(np.zeros((1, 2)), np.array([2]))

    def test_matches_finite_difference(self):
        rng = Rng(5)
        logits = rng.standard_normal((3, 4))
        y = np.array([1, 3, 0])
        _, d = nn.loss_ce(logits, y)
        h = 1e-6
        for i in range(3):
            for j in range(4):
                lp = logits.copy()
                lp[i, j] += h
                lm = logits.copy()
                lm[i, j] -= h
                # unaveraged per-sample loss -> scale mean loss by batch
                fp = nn.loss_ce(lp, y)[0] * 3
                fm = nn.loss_ce(lm, y)[0] * 3
                assert abs((fp - fm) / (2 * h) - d[i, j]) <= 1e-6


class TestBackward:
    def test_hand_computed_regression_head(self):
        # 1x2 linear, W = 0, x = (1,2), squared-error target 1 (test-only head):
        # dlogit = pred - target = -1, so g = (-1, -2), bias grad -1
        m = nn.Model([nn.Linear(2, 1)], {0: np.zeros((1, 3))})
        logits, tape = nn.forward(m, np.array([[1.0, 2.0]]))
        dlogits = logits - 1.0
        psg = nn.backward(m, tape, dlogits)
        g = psg.layers[0].dense_grads()[0]
        np.testing.assert_allclose(g, [[-1.0, -2.0, -1.0]])

    def test_per_sample_mean_equals_batch_gradient(self):
        m = mlp([5, 6, 3], act="relu", rng=Rng(2))
        rng = Rng(3)
        x = rng.standard_normal((8, 5))
        y = rng.uniform_int(0, 3, size=8)
        logits, tape = nn.forward(m, x)
        loss, dlogits = nn.loss_ce(logits, y)
        psg = nn.backward(m, tape, dlogits)
        mean_grads = psg.mean()
        # oracle: central differences of the mean loss
        theta = m.flat_params()
        flat = np.concatenate([g.ravel() for g in mean_grads])
        for i in np.linspace(0, theta.size - 1, 25).astype(int):
            tp = theta.copy()
            tp[i] += 1e-6
            tm = theta.copy()
            tm[i] -= 1e-6
            m.set_flat_params(tp)
            fp = nn.loss_ce(nn.forward(m, x)[0], y)[0]
            m.set_flat_params(tm)
            fm = nn.loss_ce(nn.forward(m, x)[0], y)[0]
            m.set_flat_params(theta)
            fd = (fp - fm) / 2e-6
            assert abs(fd - flat[i]) <= 1e-5 * max(1.0, abs(fd))

    def test_per_sample_grads_sum_consistency(self):
        # batch gradient equals the coefficient-weighted sum at 1/B exactly
        m = mlp([4, 5, 3], rng=Rng(7))
        rng = Rng(8)
        x = rng.standard_normal((6, 4))
        y = rng.uniform_int(0, 3, size=6)
        logits, tape = nn.forward(m, x)
        _, dlogits = nn.loss_ce(logits, y)
        psg = nn.backward(m, tape, dlogits)
        dense_mean = [g.dense_grads().mean(axis=0) for g in psg]
        for a, b in zip(dense_mean, psg.mean()):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_full_finite_difference_mlp(self):
        m = mlp([4, 6, 6, 3], act="tanh", rng=Rng(11))
        rng = Rng(12)
        x = rng.standard_normal((5, 4))
        y = rng.uniform_int(0, 3, size=5)
        _, g = nn.batch_grad(m, x, y)
        theta = m.flat_params()
        h = 1e-5
        for i in range(theta.size):
            tp = theta.copy()
            tp[i] += h
            tm = theta.copy()
            tm[i] -= h
            m.set_flat_params(tp)
            fp = nn.loss_ce(nn.forward(m, x)[0], y)[0]
            m.set_flat_params(tm)
            fm = nn.loss_ce(nn.forward(m, x)[0], y)[0]
            m.set_flat_params(theta)
            fd = (fp - fm) / (2 * h)
            assert abs(fd - g[i]) <= 1e-5 * max(abs(fd), abs(g[i]), 1e-4)

    def test_deltas_on_tape_after_backward(self):
        m = mlp([3, 4, 2], rng=Rng(1))
        x = Rng(2).standard_normal((4, 3))
        logits, tape = nn.forward(m, x)
        _, dlogits = nn.loss_ce(logits, np.zeros(4, dtype=int))
        nn.backward(m, tape, dlogits)
        for i in m.trainable_ids:
            assert i in tape.deltas and i in tape.acts

    def test_backward_requires_tape(self):
        m = mlp([3, 2])
        with pytest.raises(ContractError):
            nn.backward(m, nn.Tape(batch=0), np.zeros((1, 2)))


class TestIm2col:
    def test_shape_4x4_k3(self):
        x = Rng(0).standard_normal((1, 1, 4, 4))
        cols = nn.im2col(x, 3, 1, 0)
        assert cols.shape == (4, 9)

    def test_k1_is_reshape(self):
        x = Rng(1).standard_normal((2, 3, 4, 4))
        cols = nn.im2col(x, 1, 1, 0)
        want = x.transpose(0, 2, 3, 1).reshape(-1, 3)
        np.testing.assert_array_equal(cols, want)

    def test_conv_as_matmul_equals_naive(self):
        rng = Rng(2)
        for h, w, k, stride, pad in [(5, 5, 3, 1, 1), (8, 6, 3, 2, 0), (4, 4, 2, 2, 1)]:
            x = rng.standard_normal((2, 2, h, w))
            kernel = rng.standard_normal((3, 2, k, k))
            cols = nn.im2col(x, k, stride, pad)
            ho = (h + 2 * pad - k) // stride + 1
            wo = (w + 2 * pad - k) // stride + 1
            got = (cols @ kernel.reshape(3, -1).T).reshape(2, ho, wo, 3).transpose(0, 3, 1, 2)
            want = naive_conv2d(x, kernel, np.zeros(3), k, stride, pad)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ContractError):
            nn.im2col(np.zeros((1, 1, 2, 2)), 4, 1, 0)

    def test_col2im_is_adjoint(self):
        # <im2col(x), C> == <x, col2im(C)> characterizes the scatter-add
        from dpkfac._kernels import col2im_kernel

        rng = Rng(3)
        x = rng.standard_normal((2, 2, 6, 6))
        cols = nn.im2col(x, 3, 2, 1)
        c = rng.standard_normal(cols.shape)
        lhs = float((cols * c).sum())
        back = col2im_kernel(np.ascontiguousarray(c), x.shape, 3, 2, 1)
        rhs = float((x * back).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)

    def test_pure_and_compiled_kernels_agree(self):
        from dpkfac._kernels import get_backend, pure

        rng = Rng(4)
        x = np.ascontiguousarray(rng.standard_normal((2, 3, 7, 5)))
        a = pure.im2col(x, 3, 2, 1)
        b = get_backend(None).im2col(x, 3, 2, 1)
        np.testing.assert_array_equal(a, b)
        cols = np.ascontiguousarray(rng.standard_normal(a.shape))
        ga = pure.col2im(cols, x.shape, 3, 2, 1)
        gb = get_backend(None).col2im(cols, *x.shape, 3, 2, 1) if get_backend(None) is not pure else ga
        np.testing.assert_allclose(ga, gb, atol=1e-12)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = Rng(5)
        specs = [
            nn.Conv2d(1, 3, 3, stride=2, pad=1),
            nn.Activation("relu"),
            nn.Flatten(),
            nn.Linear(12, 4),
        ]
        m = nn.Model.initialized(specs, rng)
        path = str(tmp_path / "model.ckpt")
        nn.save_model(m, path)
        m2 = nn.load_model(path)
        assert [nn.spec_to_dict(s) for s in m2.specs] == [nn.spec_to_dict(s) for s in specs]
        for i in m.trainable_ids:
            np.testing.assert_array_equal(m.params[i], m2.params[i])
        x = rng.standard_normal((2, 1, 4, 4))
        np.testing.assert_array_equal(nn.forward(m, x)[0], nn.forward(m2, x)[0])


class TestInit:
    def test_relu_gain(self):
        specs = [nn.Linear(1000, 50), nn.Activation("relu"), nn.Linear(50, 10)]
        m = nn.Model.initialized(specs, Rng(0))
        v_first = m.params[0][:, :-1].var()
        assert abs(v_first - 2.0 / 1000) <= 0.3 * 2.0 / 1000
        v_last = m.params[2][:, :-1].var()
        assert abs(v_last - 1.0 / 50) <= 0.3 / 50
        assert (m.params[0][:, -1] == 0).all()
