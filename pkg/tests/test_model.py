import math

import numpy as np
import pytest
from helpers import random_operator, random_views
from oracles import loop_chebyshev, loop_fcn, loop_forward, loop_graph_conv

from mvgcn.errors import InvalidInputError
from mvgcn.graph import chebyshev_apply
from mvgcn.model import (
    ModelParams,
    acquisition_basis,
    baseline_forward,
    fcn_forward,
    flatten_theta,
    glorot_uniform,
    graph_conv_forward,
    init_baseline,
    init_params,
    match_vectors,
    mvgcn_forward,
    pairwise_match,
    pca_fit,
    softmax_head,
    unflatten_theta,
    upper_triangle,
    view_pool,
)
from mvgcn.numerics import make_rng


def random_params(rng, n, f_out, s, activation="relu", pool_mode="max"):
    return ModelParams(
        rng.normal(0.0, 0.5, (n, f_out, s)), rng.normal(size=(2, n)), activation, pool_mode
    )


class TestGraphConv:
    def test_identity_filter(self):
        rng = make_rng(0)
        op = random_operator(rng, 4)
        x = rng.normal(size=(4, 4))
        theta = np.eye(4)[:, :, None]
        np.testing.assert_allclose(graph_conv_forward(chebyshev_apply(op, x, 1), theta, "identity"), x)

    def test_zero_theta(self):
        op = random_operator(make_rng(1), 4)
        stack = chebyshev_apply(op, np.ones((4, 4)), 3)
        assert not np.any(graph_conv_forward(stack, np.zeros((4, 2, 3))))

    def test_triple_sum_oracle(self):
        rng = make_rng(2)
        op = random_operator(rng, 4)
        x = rng.normal(size=(4, 4))
        theta = rng.normal(size=(4, 2, 3))
        stack = chebyshev_apply(op, x, 3)
        expected = loop_graph_conv(stack.basis.tolist(), theta.tolist())
        np.testing.assert_allclose(graph_conv_forward(stack, theta, "identity"), expected, atol=1e-12)
        np.testing.assert_allclose(graph_conv_forward(stack, theta, "relu"), np.maximum(expected, 0), atol=1e-12)

    def test_linear_in_theta_without_activation(self):
        rng = make_rng(3)
        stack = chebyshev_apply(random_operator(rng, 6), rng.normal(size=(6, 6)), 4)
        t1, t2 = rng.normal(size=(2, 6, 3, 4))
        lhs = graph_conv_forward(stack, 1.5 * t1 - 2.0 * t2, "identity")
        rhs = 1.5 * graph_conv_forward(stack, t1, "identity") - 2.0 * graph_conv_forward(stack, t2, "identity")
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_shape_mismatch(self):
        stack = chebyshev_apply(random_operator(make_rng(0), 4), np.ones((4, 4)), 2)
        with pytest.raises(InvalidInputError):
            graph_conv_forward(stack, np.zeros((4, 2, 3)))

    def test_flatten_round_trip(self):
        theta = make_rng(0).normal(size=(5, 3, 4))
        np.testing.assert_array_equal(unflatten_theta(flatten_theta(theta), 5, 4), theta)

    def test_flat_basis_matches_stack(self):
        rng = make_rng(4)
        op = random_operator(rng, 5)
        views = random_views(rng, 2, 5)
        theta = rng.normal(size=(5, 3, 4))
        flat = acquisition_basis(op, views, 4)
        for k in range(2):
            expected = graph_conv_forward(chebyshev_apply(op, views[k], 4), theta, "identity")
            np.testing.assert_allclose(flat[k] @ flatten_theta(theta), expected, atol=1e-12)


class TestViewPool:
    A = [[1.0, 2.0], [3.0, 4.0]]
    B = [[2.0, 1.0], [0.0, 5.0]]

    def test_max(self):
        out = view_pool([self.A, self.B], "max")
        np.testing.assert_array_equal(out.pooled, [[2, 2], [3, 5]])
        np.testing.assert_array_equal(out.argmax_view, [[1, 0], [0, 1]])

    def test_mean(self):
        np.testing.assert_array_equal(view_pool([self.A, self.B], "mean").pooled, [[1.5, 1.5], [1.5, 4.5]])

    @pytest.mark.parametrize("mode", ["max", "mean"])
    def test_single_view(self, mode):
        np.testing.assert_array_equal(view_pool([self.A], mode).pooled, self.A)

    def test_tie_goes_to_lowest_view(self):
        assert view_pool([[[1.0]], [[1.0]]], "max").argmax_view[0, 0] == 0

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            view_pool([], "max")

    def test_max_dominates_mean(self):
        ys = make_rng(0).normal(size=(4, 6, 3))
        assert np.all(view_pool(ys, "max").pooled >= view_pool(ys, "mean").pooled)


class TestPairwiseMatch:
    def test_self_similarity(self):
        z = make_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(pairwise_match(z, z), 1.0, atol=1e-15)

    def test_orthogonal(self):
        np.testing.assert_array_equal(pairwise_match([[1.0, 0.0]], [[0.0, 1.0]]), [0.0])

    def test_hand_value(self):
        assert pairwise_match([[3.0, 4.0]], [[4.0, 3.0]])[0] == pytest.approx(0.96, abs=1e-15)

    def test_bounded(self):
        rng = make_rng(1)
        r = pairwise_match(rng.normal(size=(50, 4)), rng.normal(size=(50, 4)))
        assert np.all(np.abs(r) <= 1 + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            pairwise_match(np.ones((2, 2)), np.ones((3, 2)))


class TestSoftmaxHead:
    def test_zero_weights(self):
        np.testing.assert_array_equal(softmax_head([0.3, -0.2], np.zeros((2, 2))), [0.5, 0.5])

    def test_hand_value(self):
        probs = softmax_head([1.0], np.array([[math.log(3.0)], [0.0]]))
        np.testing.assert_allclose(probs, [0.75, 0.25], atol=1e-15)

    def test_large_logits(self):
        probs = softmax_head([1.0], np.array([[1000.0], [0.0]]))
        assert np.all(np.isfinite(probs))
        assert probs[0] == 1.0 and probs[1] < 1e-300

    def test_sums_to_one(self):
        rng = make_rng(2)
        for _ in range(50):
            p = softmax_head(rng.normal(size=6), rng.normal(size=(2, 6)) * 10)
            assert abs(p.sum() - 1.0) <= 1e-12
            assert np.all((p >= 0) & (p <= 1))


class TestForward:
    @pytest.mark.parametrize("activation", ["relu", "identity"])
    @pytest.mark.parametrize("pool_mode", ["max", "mean"])
    def test_scalar_loop_oracle(self, activation, pool_mode):
        rng = make_rng(7)
        n, m, s, f_out = 4, 2, 2, 3
        op = random_operator(rng, n)
        vp, vq = random_views(rng, m, n), random_views(rng, m, n)
        params = random_params(rng, n, f_out, s, activation, pool_mode)
        out = mvgcn_forward(acquisition_basis(op, vp, s), acquisition_basis(op, vq, s), params)
        r, probs = loop_forward(
            vp.tolist(), vq.tolist(), op.scaled_laplacian.tolist(), params.theta.tolist(),
            params.softmax_w.tolist(), activation, pool_mode,
        )
        np.testing.assert_allclose(out.r, r, atol=1e-12)
        np.testing.assert_allclose(out.probs, probs, atol=1e-12)

    def test_swap_symmetry_exact(self):
        rng = make_rng(8)
        op = random_operator(rng, 6)
        fp = acquisition_basis(op, random_views(rng, 3, 6), 3)
        fq = acquisition_basis(op, random_views(rng, 3, 6), 3)
        params = random_params(rng, 6, 4, 3)
        assert np.array_equal(mvgcn_forward(fp, fq, params).probs, mvgcn_forward(fq, fp, params).probs)

    def test_self_pair_relu_pattern(self):
        rng = make_rng(9)
        op = random_operator(rng, 6)
        f = acquisition_basis(op, random_views(rng, 2, 6), 3)
        params = random_params(rng, 6, 2, 3, "relu")
        r = mvgcn_forward(f, f, params).r
        nonzero = np.any(mvgcn_forward(f, f, params).branch_p.features.pooled != 0, axis=1)
        np.testing.assert_allclose(r, nonzero.astype(float), atol=1e-12)

    @pytest.mark.parametrize("pool_mode", ["max", "mean"])
    def test_view_permutation_invariance(self, pool_mode):
        rng = make_rng(10)
        op = random_operator(rng, 5)
        vp, vq = random_views(rng, 3, 5), random_views(rng, 3, 5)
        params = random_params(rng, 5, 4, 3, pool_mode=pool_mode)
        perm = [2, 0, 1]
        a = mvgcn_forward(acquisition_basis(op, vp, 3), acquisition_basis(op, vq, 3), params).probs
        b = mvgcn_forward(acquisition_basis(op, vp[perm], 3), acquisition_basis(op, vq[perm], 3), params).probs
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_view_count_mismatch(self):
        rng = make_rng(11)
        op = random_operator(rng, 4)
        params = random_params(rng, 4, 2, 2)
        with pytest.raises(InvalidInputError):
            mvgcn_forward(acquisition_basis(op, random_views(rng, 2, 4), 2),
                          acquisition_basis(op, random_views(rng, 3, 4), 2), params)


class TestInit:
    def test_glorot_bounds(self):
        w = glorot_uniform(make_rng(0), (50, 40), 50, 40)
        assert np.max(np.abs(w)) <= math.sqrt(6 / 90)

    def test_params_shapes_and_zero_softmax(self):
        p = init_params(7, 5, 3, make_rng(0))
        assert p.theta.shape == (7, 5, 3)
        assert not np.any(p.softmax_w)
        assert np.max(np.abs(p.theta)) <= math.sqrt(6 / (7 * 3 + 5))

    def test_bad_activation(self):
        with pytest.raises(InvalidInputError):
            ModelParams(np.zeros((2, 2, 2)), np.zeros((2, 2)), "tanh")


class TestPca:
    def test_rank_one_line(self):
        t = np.linspace(-1, 1, 11)
        x = np.stack([t, 2 * t + 1], axis=1)
        pca = pca_fit(x, 1)
        np.testing.assert_allclose(pca.inverse_transform(pca.transform(x)), x, atol=1e-10)

    def test_full_basis_preserves_distances(self):
        x = make_rng(0).normal(size=(15, 4))
        y = pca_fit(x, 4).transform(x)
        dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
        dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
        np.testing.assert_allclose(dx, dy, atol=1e-10)

    def test_component_variance_equals_eigenvalue(self):
        x = make_rng(1).normal(size=(20, 10)) * np.arange(1, 11)
        pca = pca_fit(x, 10)
        y = pca.transform(x)
        np.testing.assert_allclose(y.var(axis=0, ddof=1), pca.explained_variance, atol=1e-8)
        cov_eigs = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
        np.testing.assert_allclose(pca.explained_variance, cov_eigs, atol=1e-8)

    def test_gram_path_matches_covariance_path(self):
        x = make_rng(2).normal(size=(6, 30))
        y = pca_fit(x, 4).transform(x)
        # reference via SVD of the centred data
        xc = x - x.mean(axis=0)
        u, sv, _ = np.linalg.svd(xc, full_matrices=False)
        np.testing.assert_allclose(np.abs(y), np.abs(u[:, :4] * sv[:4]), atol=1e-8)

    def test_out_dim_too_large(self):
        with pytest.raises(InvalidInputError):
            pca_fit(np.ones((5, 3)), 4)


class TestBaselines:
    def test_fcn_zero(self):
        layers = [(np.zeros((3, 4)), np.zeros(3))]
        np.testing.assert_array_equal(fcn_forward(np.ones(4), layers), np.zeros(3))

    def test_fcn_relu(self):
        np.testing.assert_array_equal(fcn_forward([-1.0, 2.0], [(np.eye(2), np.zeros(2))]), [0.0, 2.0])

    def test_fcn_loop_oracle(self):
        rng = make_rng(3)
        layers = [(rng.normal(size=(5, 4)), rng.normal(size=5)), (rng.normal(size=(3, 5)), rng.normal(size=3))]
        x = rng.normal(size=4)
        expected = loop_fcn(x.tolist(), [(w.tolist(), b.tolist()) for w, b in layers])
        np.testing.assert_allclose(fcn_forward(x, layers), expected, atol=1e-12)

    def test_fcn_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            fcn_forward(np.ones(3), [(np.ones((2, 4)), np.zeros(2))])

    def test_match_identical_unit_vectors(self):
        v = np.array([0.6, 0.8])
        r = match_vectors(v, v)
        np.testing.assert_allclose(r, v * v)
        assert r.sum() == pytest.approx(1.0, abs=1e-15)

    def test_raw_self_pair_is_maximal(self):
        rng = make_rng(4)
        a, b = rng.uniform(size=(2, 10))
        assert match_vectors(a, a).sum() >= match_vectors(a, b).sum()

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            match_vectors(np.ones(3), np.ones(4))

    def test_upper_triangle(self):
        np.testing.assert_array_equal(upper_triangle(np.arange(9).reshape(3, 3)), [1, 2, 5])

    def test_fcn2_shapes(self):
        params = init_baseline("fcn2", 0, 12, make_rng(0), fcn_dims=(8, 4))
        assert [w.shape for w, _ in params.encoder] == [(8, 12)]
        assert [w.shape for w, _ in params.head] == [(4, 8)]
        assert params.softmax_w.shape == (2, 4)
        probs = baseline_forward(np.ones(8), np.ones(8), params)
        np.testing.assert_allclose(probs, [0.5, 0.5])

    def test_pca_needs_transform(self):
        with pytest.raises(InvalidInputError):
            init_baseline("pca", 0, 10, make_rng(0))
