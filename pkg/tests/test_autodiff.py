"""Finite-difference checks of every layer type in isolation."""

import numpy as np
import pytest

from infantmotion import autodiff as ad
from oracles import check_layer


class TestLayerGradients:
    def test_dense(self, rng):
        err = check_layer(ad.dense, [rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)], rng)
        assert err < 1e-7

    @pytest.mark.parametrize("stride", [(1, 1), (1, 2), (2, 3)])
    def test_conv2d(self, rng, stride):
        x = rng.normal(size=(2, 1, 6, 13))
        W = rng.normal(size=(3, 1, 3, 5))
        b = rng.normal(size=3)
        err = check_layer(lambda x, W, b: ad.conv2d(x, W, b, stride), [x, W, b], rng)
        assert err < 1e-7

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.normal(size=(1, 2, 4, 9))
        W = rng.normal(size=(2, 2, 2, 3))
        b = rng.normal(size=2)
        out = ad.conv2d(ad.constant(x), ad.constant(W), ad.constant(b), (1, 2)).data
        for f in range(2):
            for i in range(3):
                for j in range(4):
                    ref = np.sum(x[0, :, i : i + 2, 2 * j : 2 * j + 3] * W[f]) + b[f]
                    assert out[0, f, i, j] == pytest.approx(ref)

    @pytest.mark.parametrize("dilation,k", [(1, 3), (2, 3), (4, 5), (8, 3)])
    def test_dilated_conv1d(self, rng, dilation, k):
        x = rng.normal(size=(20, 4))
        W = rng.normal(size=(k, 4, 3))
        b = rng.normal(size=3)
        err = check_layer(lambda x, W, b: ad.dilated_conv1d(x, W, b, dilation), [x, W, b], rng)
        assert err < 1e-7

    def test_dilated_conv1d_taps(self, rng):
        x = rng.normal(size=(10, 1))
        W = np.array([1.0, 10.0, 100.0]).reshape(3, 1, 1)
        out = ad.dilated_conv1d(ad.constant(x), ad.constant(W), ad.constant(np.zeros(1)), 2).data[:, 0]
        xp = np.r_[0, 0, x[:, 0], 0, 0]
        ref = [xp[t] + 10 * xp[t + 2] + 100 * xp[t + 4] for t in range(10)]
        np.testing.assert_allclose(out, ref)

    def test_residual_add(self, rng):
        err = check_layer(ad.add, [rng.normal(size=(4, 3)), rng.normal(size=(4, 3))], rng)
        assert err < 1e-9
        with pytest.raises(ValueError):
            ad.add(ad.constant(np.zeros(2)), ad.constant(np.zeros(3)))

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(6, 5))
        x[np.abs(x) < 1e-2] = 0.5
        assert check_layer(ad.relu, [x], rng) < 1e-8

    def test_concat_reshape_pool(self, rng):
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 1, 4))
        assert check_layer(lambda a, b: ad.concat([a, b], axis=1), [a, b], rng) < 1e-9
        assert check_layer(lambda a: ad.reshape(a, (6, 4)), [a], rng) < 1e-9
        assert check_layer(lambda a: ad.mean_pool(a, (1, 2)), [a], rng) < 1e-9

    def test_softmax_cross_entropy_soft_targets(self, rng):
        z = rng.normal(size=(6, 4))
        q = rng.dirichlet(np.ones(4), size=6)
        mask = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
        err = check_layer(lambda z: ad.softmax_cross_entropy(z, q, mask), [z], rng)
        assert err < 1e-7

    def test_hard_target_is_standard_cross_entropy(self, rng):
        z = rng.normal(size=(3, 4))
        q = np.eye(4)[[2, 0, 3]]
        loss = ad.softmax_cross_entropy(ad.constant(z), q).data
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        assert loss == pytest.approx(-np.mean(logp[[0, 1, 2], [2, 0, 3]]))

    def test_shared_parent_accumulates(self, rng):
        x = rng.normal(size=(3, 3))
        assert check_layer(lambda x: ad.add(x, ad.relu(x)), [np.abs(x) + 0.1], rng) < 1e-8


class TestAdam:
    def test_minimises_quadratic(self):
        p = ad.Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            p.grad = 2 * p.data
            opt.step()
        np.testing.assert_allclose(p.data, 0.0, atol=1e-2)

    def test_backward_requires_scalar(self):
        t = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.relu(t).backward()
