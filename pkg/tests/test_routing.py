import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapted_moe import prng
from adapted_moe.exceptions import DegenerateVectorError, DimensionError
from adapted_moe.numeric import finite_diff_check, l2_normalize
from adapted_moe.routing import (
    RoutingParams,
    class_mean_centers,
    cosine_scores,
    embed,
    embed_backward,
    init_routing_params,
    route,
    route_topk,
    routing_accuracy,
    routing_loss,
    train_routing,
    update_centers,
)


def identity_params(c):
    w = np.zeros((c, c, 3, 3))
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    return RoutingParams(w, np.zeros(c), np.zeros((2, c)), np.eye(2, c), activation="none")


class TestEmbed:
    def test_identity_projection_on_constant_map(self):
        vec = np.array([0.5, -1.0, 2.0])
        fm = np.broadcast_to(vec[:, None, None], (3, 4, 4))
        out, _ = embed(fm, identity_params(3), normalize=False)
        np.testing.assert_allclose(out.x[0], vec, atol=1e-12)

    def test_gap_is_mean_of_rows(self):
        rng = prng.make_rng(0)
        params = init_routing_params(4, 6, 2, rng)
        fm = np.random.default_rng(1).normal(size=(3, 4, 5, 5))
        out, _ = embed(fm, params, normalize=False)
        np.testing.assert_allclose(out.x, out.E.mean(axis=1), atol=1e-12)
        assert out.E.shape == (3, 25, 6)

    def test_normalized_unit_norm(self):
        params = init_routing_params(4, 6, 2, prng.make_rng(2))
        fm = np.random.default_rng(3).normal(size=(5, 4, 3, 3)) + 1.0
        out, _ = embed(fm, params, normalize=True)
        np.testing.assert_allclose(np.linalg.norm(out.x, axis=1), 1.0, atol=1e-6)
        norms = np.linalg.norm(out.E, axis=2)
        assert np.all((np.abs(norms - 1.0) < 1e-6) | (norms == 0.0))

    def test_dead_map_raises(self):
        params = init_routing_params(2, 3, 2, prng.make_rng(0))
        params.proj_weight[:] = 0.0
        params.proj_bias[:] = -1.0
        with pytest.raises(DegenerateVectorError):
            embed(np.ones((2, 3, 3)), params, normalize=True)

    def test_dead_location_stays_zero(self):
        params = identity_params(2)
        params.activation = "relu"
        fm = np.ones((2, 2, 2))
        fm[:, 0, 0] = -1.0
        out, _ = embed(fm, params, normalize=True)
        np.testing.assert_array_equal(out.E[0, 0], [0.0, 0.0])
        np.testing.assert_allclose(np.linalg.norm(out.E[0, 1:], axis=1), 1.0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            embed(np.zeros((3, 4, 4)), identity_params(2), normalize=False)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_backward(self, normalize):
        rng = np.random.default_rng(4)
        params = init_routing_params(3, 4, 2, prng.make_rng(5), activation="sigmoid")
        fm = rng.normal(size=(2, 3, 3, 3))
        gx = rng.normal(size=(2, 4))
        gE = rng.normal(size=(2, 9, 4))

        def loss():
            out, cache = embed(fm, params, normalize)
            gw, gb = embed_backward(gx, gE, cache)
            return float((out.x * gx).sum() + (out.E * gE).sum()), [gw, gb]

        err = finite_diff_check(loss, [params.proj_weight, params.proj_bias], epsilon=1e-6)
        assert err < 1e-4


class TestRoutingLoss:
    def test_sample_at_center(self):
        x = np.array([[0.6, 0.8]])
        loss, _, _ = routing_loss(x, [0], np.zeros((2, 2)), x.copy(), alpha=1.0 - 1e-15)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_by_hand_value(self):
        # ||x - c||^2 = 1 and a classifier that is certain of the label
        x = np.array([[1.0, 0.0]])
        centers = np.array([[0.0, 0.0], [5.0, 5.0]])
        clf = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
        loss, _, _ = routing_loss(x, [0], clf, centers, alpha=0.5)
        assert loss == pytest.approx(0.5, abs=1e-12)

    def test_non_negative_and_sums_over_batch(self):
        rng = np.random.default_rng(6)
        x, w, c = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        y = np.array([0, 2, 1, 2])
        total, _, _ = routing_loss(x, y, w, c, 0.3)
        parts = [routing_loss(x[i:i + 1], y[i:i + 1], w, c, 0.3)[0] for i in range(4)]
        assert total >= 0
        assert total == pytest.approx(sum(parts), rel=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x, w, c = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        y = np.array([1, 0, 2, 1])

        def loss():
            val, gx, gw = routing_loss(x, y, w, c, 0.5)
            return val, [gx, gw]

        assert finite_diff_check(loss, [x, w], epsilon=1e-6, max_coords=None) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            routing_loss(np.zeros((1, 2)), [3], np.zeros((3, 2)), np.zeros((3, 2)), 0.5)


class TestCenters:
    def test_fixed_point(self):
        c = l2_normalize(np.random.default_rng(8).normal(size=(3, 4)))
        x = c[[0, 0, 2]]
        np.testing.assert_allclose(update_centers(x, [0, 0, 2], c, 0.5), c, atol=1e-15)

    def test_single_sample_midpoint(self):
        c = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.array([[0.0, 2.0]])
        out = update_centers(x, [0], c, rate=1.0, normalize=False)
        np.testing.assert_allclose(out[0], [0.5, 1.0])

    def test_renormalized(self):
        c = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = update_centers(np.array([[0.0, 2.0]]), [0], c, rate=1.0, normalize=True)
        np.testing.assert_allclose(out[0], l2_normalize(np.array([0.5, 1.0])))

    def test_absent_class_untouched(self):
        c = np.random.default_rng(9).normal(size=(3, 4))
        out = update_centers(np.ones((2, 4)), [0, 0], c, 0.5)
        assert out[1].tobytes() == c[1].tobytes() and out[2].tobytes() == c[2].tobytes()

    def test_class_mean_centers(self):
        x = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(class_mean_centers(x, [0, 0, 1], 2, normalize=False),
                                   [[2.0, 0.0], [0.0, 2.0]])
        with pytest.raises(ValueError):
            class_mean_centers(x, [0, 0, 0], 2)


class TestRouteTopk:
    def test_by_hand_k1(self):
        idx, w = route_topk(np.array([1.0, 0.0]), np.eye(2), 1)
        assert idx.tolist() == [0] and w.tolist() == [1.0]

    def test_by_hand_k2(self):
        idx, w = route_topk(np.array([1.0, 0.0]), np.eye(2), 2)
        e = np.e
        assert idx.tolist() == [0, 1]
        np.testing.assert_allclose(w, [e / (e + 1), 1 / (e + 1)], atol=1e-12)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            route_topk(np.ones(2), np.eye(2), 3)
        with pytest.raises(ValueError):
            route_topk(np.ones(2), np.eye(2), 0)

    def test_ties_break_to_lower_index(self):
        idx, w = route_topk(np.array([1.0, 1.0]), np.eye(2), 1)
        assert idx.tolist() == [0]

    def test_route_attaches_fields(self):
        params = init_routing_params(2, 3, 4, prng.make_rng(0))
        out, _ = embed(np.random.default_rng(1).normal(size=(2, 2, 3, 3)) + 1, params, True)
        route(out, params.centers, 2)
        assert out.topk.shape == (2, 2)
        np.testing.assert_allclose(out.weights.sum(axis=1), 1.0)
        np.testing.assert_array_equal(np.argmax(out.scores, axis=1), out.topk[:, 0])

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
        st.floats(1e-3, 1e3),
        st.integers(1, 4),
        st.integers(0, 2**31 - 1),
    )
    def test_scale_invariance(self, x, t, k, seed):
        centers = np.random.default_rng(seed).normal(size=(4, 5))
        i1, w1 = route_topk(x, centers, k)
        i2, w2 = route_topk(t * x, centers, k)
        assert i1.tolist() == i2.tolist()
        np.testing.assert_allclose(w1, w2, atol=1e-9)
        assert abs(w1.sum() - 1.0) < 1e-9

    def test_cosine_scores_dim_check(self):
        with pytest.raises(DimensionError):
            cosine_scores(np.ones(3), np.eye(2))


def test_train_routing_separable_clusters():
    rng = np.random.default_rng(0)
    means = 2.0 * np.eye(8)[:3]
    X = np.concatenate([means[k][None, :, None, None] + 0.5 * rng.normal(size=(30, 8, 3, 3))
                        for k in range(3)])
    y = np.repeat(np.arange(3), 30)
    params, losses = train_routing(X, y, steps=60, lr_start=1e-3, lr_end=2e-3)
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert routing_accuracy(X, y, params) == 1.0
    np.testing.assert_allclose(np.linalg.norm(params.centers, axis=1), 1.0)


def test_train_routing_deterministic():
    X = np.random.default_rng(1).normal(size=(12, 4, 3, 3)) + 1.0
    y = np.repeat(np.arange(3), 4)
    a, la = train_routing(X, y, steps=5, seed=3)
    b, lb = train_routing(X, y, steps=5, seed=3)
    assert la == lb
    assert a.proj_weight.tobytes() == b.proj_weight.tobytes()
