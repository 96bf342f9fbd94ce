import math

import numpy as np
import pytest
from helpers import random_operator, random_views

from mvgcn.autodiff import (
    Gradients,
    _branch_backward,
    baseline_batch_loss_and_grad,
    cross_entropy,
    finite_difference_check,
    mvgcn_backward,
    mvgcn_batch_loss_and_grad,
    random_instance,
)
from mvgcn.errors import InvalidInputError
from mvgcn.model import ModelParams, acquisition_basis, init_baseline, mvgcn_forward, pca_fit, upper_triangle
from mvgcn.numerics import make_rng


def batch_setup(seed, n=6, m=2, s=3, f_out=4, count=6, activation="relu", pool_mode="max"):
    rng = make_rng(seed)
    op = random_operator(rng, n)
    flats = [acquisition_basis(op, random_views(rng, m, n), s) for _ in range(count)]
    params = ModelParams(rng.normal(0, 0.5, (n, f_out, s)), rng.normal(size=(2, n)), activation, pool_mode)
    p, q = np.triu_indices(count, 1)
    labels = rng.integers(0, 2, len(p))
    return flats, p, q, labels, params


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy([1.0, 0.0], 0).value <= 1e-15

    def test_uniform(self):
        assert cross_entropy([0.5, 0.5], 1).value == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        assert cross_entropy([0.25, 0.75], 1).value == pytest.approx(math.log(4 / 3), abs=1e-12)

    def test_floor(self):
        assert cross_entropy([1.0, 0.0], 1).value == pytest.approx(-math.log(1e-15))

    def test_bad_label(self):
        with pytest.raises(InvalidInputError):
            cross_entropy([0.5, 0.5], 2)


class TestBackward:
    def test_softmax_gradient_closed_form(self):
        inst = random_instance(6, 2, 3, 4, seed=1)
        out = mvgcn_forward(inst.flat_p, inst.flat_q, inst.params)
        g = mvgcn_backward(out, inst.label, inst.params)
        onehot = np.eye(2)[inst.label]
        np.testing.assert_allclose(g.d_softmax_w, np.outer(out.probs - onehot, out.r), atol=1e-12)

    def test_zero_softmax_start(self):
        inst = random_instance(5, 2, 2, 3, seed=2)
        params = ModelParams(inst.params.theta, np.zeros((2, 5)))
        out = mvgcn_forward(inst.flat_p, inst.flat_q, params)
        g = mvgcn_backward(out, 1, params)
        np.testing.assert_allclose(out.probs, [0.5, 0.5])
        np.testing.assert_allclose(g.d_softmax_w, np.stack([0.5 * out.r, -0.5 * out.r]), atol=1e-15)
        assert not np.any(g.d_theta)  # zero softmax weights block the flow into theta

    def test_branch_symmetry(self):
        inst = random_instance(6, 2, 3, 4, seed=3)
        a = mvgcn_backward(mvgcn_forward(inst.flat_p, inst.flat_q, inst.params), 1, inst.params)
        b = mvgcn_backward(mvgcn_forward(inst.flat_q, inst.flat_p, inst.params), 1, inst.params)
        np.testing.assert_allclose(a.d_theta, b.d_theta, atol=1e-12)
        np.testing.assert_allclose(a.d_softmax_w, b.d_softmax_w, atol=1e-12)

    def test_linearity_in_upstream_gradient(self):
        inst = random_instance(6, 2, 3, 4, seed=4, activation="identity")
        out = mvgcn_forward(inst.flat_p, inst.flat_q, inst.params)
        d = make_rng(0).normal(size=out.branch_p.zhat.shape)
        once = _branch_backward(out.branch_p, d, inst.params)
        twice = _branch_backward(out.branch_p, 2.0 * d, inst.params)
        np.testing.assert_array_equal(twice, 2.0 * once)

    def test_missing_cache(self):
        inst = random_instance(4, 1, 2, 2, seed=0)
        out = mvgcn_forward(inst.flat_p, inst.flat_q, inst.params)
        out.branch_p = None
        with pytest.raises(RuntimeError):
            mvgcn_backward(out, 0, inst.params)


class TestFiniteDifference:
    @pytest.mark.parametrize("pool_mode", ["max", "mean"])
    def test_identity_activation_tight(self, pool_mode):
        for seed in range(5):
            inst = random_instance(6, 2, 3, 4, seed, "identity", pool_mode)
            assert finite_difference_check(inst.params, inst.flat_p, inst.flat_q, inst.label) < 1e-7

    @pytest.mark.parametrize("pool_mode", ["max", "mean"])
    def test_relu(self, pool_mode):
        for seed in range(5):
            inst = random_instance(8, 3, 5, 8, seed, "relu", pool_mode)
            assert finite_difference_check(inst.params, inst.flat_p, inst.flat_q, inst.label) < 1e-5

    def test_detects_corrupted_gradient(self):
        inst = random_instance(6, 2, 3, 4, seed=5, activation="identity")
        good = mvgcn_backward(mvgcn_forward(inst.flat_p, inst.flat_q, inst.params), inst.label, inst.params)
        theta = good.d_theta.copy()
        idx = np.unravel_index(np.argmax(np.abs(theta)), theta.shape)
        theta[idx] *= 2.0
        bad = Gradients({"theta": theta, "softmax_w": good.d_softmax_w})
        err = finite_difference_check(
            inst.params, inst.flat_p, inst.flat_q, inst.label, analytic=bad, n_coords=inst.params.theta.size
        )
        assert err > 1e-2

    def test_epsilon_range(self):
        inst = random_instance(4, 1, 2, 2, seed=0)
        with pytest.raises(InvalidInputError):
            finite_difference_check(inst.params, inst.flat_p, inst.flat_q, 0, epsilon=1e-3)


class TestBatch:
    @pytest.mark.parametrize("pool_mode", ["max", "mean"])
    def test_batch_equals_mean_of_pairs(self, pool_mode):
        flats, p, q, labels, params = batch_setup(0, pool_mode=pool_mode)
        loss, g = mvgcn_batch_loss_and_grad(flats, p, q, labels, params)
        losses, d_theta, d_w = [], 0.0, 0.0
        for a, b, y in zip(p, q, labels):
            out = mvgcn_forward(flats[a], flats[b], params)
            losses.append(cross_entropy(out.probs, y).value)
            gp = mvgcn_backward(out, y, params)
            d_theta = d_theta + gp.d_theta
            d_w = d_w + gp.d_softmax_w
        assert loss == pytest.approx(np.mean(losses), abs=1e-12)
        np.testing.assert_allclose(g.d_theta, d_theta / len(p), atol=1e-12)
        np.testing.assert_allclose(g.d_softmax_w, d_w / len(p), atol=1e-12)

    def test_workers_do_not_change_result(self):
        flats, p, q, labels, params = batch_setup(1, count=8)
        l1, g1 = mvgcn_batch_loss_and_grad(flats, p, q, labels, params, workers=1)
        l4, g4 = mvgcn_batch_loss_and_grad(flats, p, q, labels, params, workers=4)
        assert l1 == l4
        assert np.array_equal(g1.d_theta, g4.d_theta)
        assert np.array_equal(g1.d_softmax_w, g4.d_softmax_w)

    def test_loss_decreases_under_small_steps(self):
        flats, p, q, labels, params = batch_setup(2, activation="identity")
        losses = []
        for _ in range(11):
            loss, g = mvgcn_batch_loss_and_grad(flats, p, q, labels, params)
            losses.append(loss)
            params.theta -= 1e-3 * g.d_theta
            params.softmax_w -= 1e-3 * g.d_softmax_w
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestBaselineGradients:
    @pytest.mark.parametrize("kind", ["raw", "pca", "fcn", "fcn2"])
    def test_matches_central_differences(self, kind):
        rng = make_rng(3)
        inputs = np.stack([upper_triangle(v[0]) for v in (random_views(rng, 1, 6) for _ in range(6))])
        pca = pca_fit(inputs, 4) if kind == "pca" else None
        params = init_baseline(kind, 0, inputs.shape[1], rng, pca, fcn_dims=(7, 5))
        params.softmax_w[:] = rng.normal(size=params.softmax_w.shape)
        p, q = np.triu_indices(6, 1)
        labels = rng.integers(0, 2, len(p))
        _, g = baseline_batch_loss_and_grad(inputs, p, q, labels, params)
        arrays = params.arrays()
        eps = 1e-6
        worst = 0.0
        for name, arr in arrays.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = baseline_batch_loss_and_grad(inputs, p, q, labels, params)[0]
                arr[idx] = old - eps
                down = baseline_batch_loss_and_grad(inputs, p, q, labels, params)[0]
                arr[idx] = old
                numeric = (up - down) / (2 * eps)
                worst = max(worst, abs(numeric - g[name][idx]) / max(abs(numeric), abs(g[name][idx]), 1e-6))
        assert worst < 1e-5
