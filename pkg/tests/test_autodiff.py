"""Gradient checks for the autodiff ops and the full networks."""

import numpy as np
import pytest

from xmct import autodiff as ad
from xmct import nets


def finite_difference(graph_fn, params, eps=1e-6):
    """Central differences over every coordinate of every param tensor."""
    ad.zero_grad(params)
    graph_fn().backward()
    grads = [p.grad.copy() for p in params]
    fds = []
    for p in params:
        fd = np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = graph_fn().item()
            flat[i] = old - eps
            lm = graph_fn().item()
            flat[i] = old
            fd.ravel()[i] = (lp - lm) / (2 * eps)
        fds.append(fd)
    return grads, fds


def assert_close_grads(grads, fds, tol=1e-5):
    for g, fd in zip(grads, fds):
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
        assert err.max() <= tol, f"max rel err {err.max()}"


class TestOpGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def test_conv_dense_activation_pipeline(self):
        rng = self.rng
        x = ad.leaf(rng.standard_normal((2, 6, 6, 3)), requires_grad=True)
        w1 = ad.leaf(rng.standard_normal((3, 3, 3, 4)) * 0.4, requires_grad=True)
        b1 = ad.leaf(rng.standard_normal(4) * 0.1, requires_grad=True)
        w2 = ad.leaf(rng.standard_normal((3, 3, 4, 3)) * 0.4, requires_grad=True)
        b2 = ad.leaf(rng.standard_normal(3) * 0.1, requires_grad=True)
        target = rng.standard_normal((2, 6, 6, 3))

        def graph():
            h = ad.silu(ad.conv2d(x, w1, b1))
            h = ad.upsample2(ad.avg_pool2(h))
            h = ad.sigmoid(ad.conv2d(h, w2, b2))
            h = ad.add(h, x)
            return ad.mse_loss(h, target)

        assert_close_grads(*finite_difference(graph, [x, w1, b1, w2, b2]))

    def test_dense_and_l1(self):
        rng = self.rng
        x = ad.leaf(rng.standard_normal((3, 5)), requires_grad=True)
        w = ad.leaf(rng.standard_normal((5, 4)) * 0.5, requires_grad=True)
        b = ad.leaf(rng.standard_normal(4) * 0.1, requires_grad=True)
        target = rng.standard_normal((3, 4)) + 2.0   # keep |pred - target| > 0

        def graph():
            return ad.l1_loss(ad.dense(x, w, b), target)

        assert_close_grads(*finite_difference(graph, [x, w, b]))

    def test_broadcast_add_reshape(self):
        rng = self.rng
        x = ad.leaf(rng.standard_normal((2, 4, 4, 3)), requires_grad=True)
        v = ad.leaf(rng.standard_normal((2, 3)), requires_grad=True)
        target = rng.standard_normal((2, 4, 4, 3))

        def graph():
            vb = ad.reshape(v, (2, 1, 1, 3))
            return ad.mse_loss(ad.add(x, vb), target)

        assert_close_grads(*finite_difference(graph, [x, v]))

    def test_scale_square_sum(self):
        rng = self.rng
        x = ad.leaf(rng.standard_normal((4, 4)), requires_grad=True)

        def graph():
            return ad.scale(ad.sum_all(ad.square(x)), 0.3)

        assert_close_grads(*finite_difference(graph, [x]))

    def test_mul_sub_mean(self):
        rng = self.rng
        a = ad.leaf(rng.standard_normal((3, 3)), requires_grad=True)
        b = ad.leaf(rng.standard_normal((3, 3)), requires_grad=True)

        def graph():
            return ad.mean(ad.square(ad.sub(ad.mul(a, b), ad.leaf(np.ones((3, 3))))))

        assert_close_grads(*finite_difference(graph, [a, b]))

    def test_dot_with_const_injects_gradient(self):
        rng = self.rng
        x = ad.leaf(rng.standard_normal((2, 3)), requires_grad=True)
        g = rng.standard_normal((2, 3))
        ad.zero_grad([x])
        ad.dot_with_const(x, g).backward()
        assert np.allclose(x.grad, g, rtol=0, atol=1e-12)

    def test_backward_requires_scalar(self):
        x = ad.leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            ad.square(x).backward()

    def test_grad_accumulates_across_shared_use(self):
        x = ad.leaf(np.array(3.0), requires_grad=True)
        y = ad.add(ad.square(x), ad.square(x))
        ad.zero_grad([x])
        y.backward()
        assert float(x.grad) == pytest.approx(12.0)


class TestNetworkGradients:
    def test_tiny_denoiser_against_central_differences(self):
        # spec gate: <= 1e3 parameters, step 1e-4, rel err <= 1e-3 on >= 95%
        net = nets.DenoiserNet(base=2, levels=2, emb_dim=4, dtype=np.float64, seed=3)
        params = net.params()
        assert nets.num_params(net) <= 1000
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 8, 8))
        t = np.array([3, 7])
        target = rng.standard_normal((2, 8, 8, 1))

        def graph():
            return ad.mse_loss(net(x, t), target)

        ad.zero_grad(params)
        graph().backward()
        analytic = np.concatenate([p.grad.ravel() for p in params])

        flat = nets.pack(net)
        fd = np.zeros_like(flat)
        eps = 1e-4
        for i in range(flat.size):
            v = flat.copy()
            v[i] += eps
            nets.unpack(net, v)
            lp = graph().item()
            v[i] -= 2 * eps
            nets.unpack(net, v)
            lm = graph().item()
            fd[i] = (lp - lm) / (2 * eps)
        nets.unpack(net, flat)

        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-7)
        assert float(np.mean(rel <= 1e-3)) >= 0.95
        # input gradient exists too (dLoss/dInput contract)
        xin = ad.leaf(x[..., None], requires_grad=True)
        ad.zero_grad(params + [xin])
        ad.mse_loss(net(xin, t), target).backward()
        assert xin.grad is not None and np.all(np.isfinite(xin.grad))

    def test_translator_gradients(self):
        net = nets.TranslationNet(base=2, dtype=np.float64, seed=4)
        params = net.params()
        rng = np.random.default_rng(6)
        est = rng.standard_normal((1, 8, 8))
        aux = rng.standard_normal((1, 8, 8))
        target = rng.random((1, 8, 8, 1))

        def graph():
            return ad.l1_loss(net(est, aux), target)

        grads, fds = finite_difference(graph, params, eps=1e-6)
        for g, fd in zip(grads, fds):
            err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
            assert err.max() <= 1e-4


class TestPackUnpack:
    def test_roundtrip_identity(self):
        net = nets.DenoiserNet(base=3, levels=2, emb_dim=6, seed=9)
        flat = nets.pack(net)
        out = net.predict(np.ones((1, 8, 8), np.float32), 5)
        nets.unpack(net, flat.copy())
        assert np.array_equal(out, net.predict(np.ones((1, 8, 8), np.float32), 5))

    def test_wrong_size_rejected(self):
        net = nets.DenoiserNet(base=3, levels=2, emb_dim=6)
        from xmct.errors import ConfigError
        with pytest.raises(ConfigError):
            nets.unpack(net, np.zeros(10, np.float32))


def test_sgd_momentum_state_roundtrip():
    net = nets.TranslationNet(base=2, seed=1)
    opt = nets.SGD(net.params(), lr=0.1, momentum=0.9)
    x = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
    loss = ad.l1_loss(net(x, x), np.zeros((1, 8, 8, 1), np.float32))
    opt.zero_grad()
    loss.backward()
    opt.step()
    state = opt.state_vector()
    opt2 = nets.SGD(net.params(), lr=0.1, momentum=0.9)
    opt2.load_state_vector(state)
    assert np.array_equal(state, opt2.state_vector())
