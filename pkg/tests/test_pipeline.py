import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapted_moe import TrainConfig, infer_image, infer_images, train_model
from adapted_moe.data import SyntheticConfig, generate_synthetic_dataset
from adapted_moe.exceptions import DimensionError, EmptyExpertError
from adapted_moe.pipeline import InferenceFlags, aggregate_scores, build_anomaly_map, score_locations

from conftest import SMALL_DATA


def bundle_bytes(b):
    parts = [b.routing.proj_weight, b.routing.proj_bias, b.routing.classifier, b.routing.centers]
    parts += [a for e in b.experts for a in e.arrays()]
    parts += [a for s in b.stats for a in (s.center, s.std)]
    return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


@pytest.fixture(scope="module")
def tiny():
    ds = generate_synthetic_dataset(SyntheticConfig(**{**SMALL_DATA, "train_per_subclass": 3}))
    return ds


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr_start, cfg.lr_end, cfg.top_k) == (160, 8, 1e-4, 2e-4, 4)
        assert cfg.noise_std == 0.015 and cfg.moe and cfg.tta and cfg.norm

    @pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(alpha=1.0), dict(loss="mse"),
                                     dict(top_k=0), dict(batch_size=0), dict(noise_std=0.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_softmax_loss_drops_center_term(self):
        assert TrainConfig(loss="softmax").effective_alpha == 0.0
        assert TrainConfig(alpha=0.3).effective_alpha == 0.3

    def test_dict_round_trip_ignores_unknown(self):
        cfg = TrainConfig(epochs=3, moe=False)
        assert TrainConfig.from_dict({**cfg.to_dict(), "extra": 1}) == cfg


class TestTraining:
    def test_bundle_shape(self, tiny):
        b = train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=2), tiny.image_size)
        assert b.n_experts == 3 == len(b.stats) == b.routing.centers.shape[0]
        assert b.in_channels == 16 and b.image_size == (12, 12)
        assert len(b.history) == 2 and b.history[0]["epoch"] == 1
        np.testing.assert_allclose(np.linalg.norm(b.routing.centers, axis=1), 1.0, atol=1e-6)
        assert all(a.dtype == np.float32 for e in b.experts for a in e.arrays())

    def test_moe_off_single_expert(self, tiny):
        b = train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=1, moe=False))
        assert b.n_experts == 1
        assert b.stats[0].count == len(tiny.train_X) * 36
        assert all(h["routing_loss"] == 0.0 for h in b.history)

    def test_deterministic(self, tiny):
        cfg = TrainConfig(epochs=2, seed=5)
        a = train_model(tiny.train_X, tiny.train_y, cfg)
        b = train_model(tiny.train_X, tiny.train_y, cfg)
        assert bundle_bytes(a) == bundle_bytes(b)
        c = train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=2, seed=6))
        assert bundle_bytes(a) != bundle_bytes(c)

    def test_empty_subclass(self, tiny):
        y = tiny.train_y.copy()
        y[y == 1] = 2
        with pytest.raises(EmptyExpertError, match=r"\[1\]"):
            train_model(tiny.train_X, y, TrainConfig(epochs=1))

    def test_input_errors(self, tiny):
        with pytest.raises(DimensionError):
            train_model(tiny.train_X[0], tiny.train_y[:1], TrainConfig(epochs=1))
        with pytest.raises(DimensionError):
            train_model(tiny.train_X, tiny.train_y[:-1], TrainConfig(epochs=1))

    def test_epoch_log_records(self, tiny, caplog):
        with caplog.at_level(logging.INFO, logger="adapted_moe.pipeline"):
            train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=2))
        records = [r.record for r in caplog.records if hasattr(r, "record")]
        assert [r["epoch"] for r in records] == [1, 2]
        assert set(records[0]) == {"epoch", "routing_loss", "expert_loss", "lr"}

    def test_all_flag_combinations_run(self, tiny):
        for moe in (False, True):
            for norm in (False, True):
                b = train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=1, moe=moe, norm=norm))
                for tta in (False, True):
                    res = infer_images(tiny.test_X[:2], b, InferenceFlags(tta=tta, top_k=2))
                    assert all(np.all(np.isfinite(r.anomaly_map)) for r in res)


class TestAggregate:
    def test_single_expert_exact(self):
        m = np.random.default_rng(0).normal(size=9)
        out = aggregate_scores([0.37], [m])
        assert out.tobytes() == m.tobytes()

    def test_by_hand(self):
        assert aggregate_scores([0.7, 0.3], [[0.9], [0.5]])[0] == pytest.approx(0.78, abs=1e-12)

    def test_equal_weights_mean(self):
        maps = np.random.default_rng(1).normal(size=(4, 10))
        np.testing.assert_allclose(aggregate_scores([0.25] * 4, maps), maps.mean(axis=0), atol=1e-7)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate_scores([0.0, 0.0], [[1.0], [2.0]])
        with pytest.raises(ValueError):
            aggregate_scores([0.5, -0.1], [[1.0], [2.0]])
        with pytest.raises(DimensionError):
            aggregate_scores([1.0], [[1.0], [2.0]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_convex_combination(self, k, seed):
        rng = np.random.default_rng(seed)
        w = rng.uniform(0.01, 1.0, size=k)
        maps = rng.normal(size=(k, 7))
        out = aggregate_scores(w / w.sum(), maps)
        assert np.all(out >= maps.min(axis=0) - 1e-12) and np.all(out <= maps.max(axis=0) + 1e-12)


class TestInference:
    def test_score_is_map_max(self, small_bundle, small_dataset):
        for r in infer_images(small_dataset.test_X[:6], small_bundle):
            assert r.score == r.anomaly_map.max()
            assert r.anomaly_map.shape == (12, 12)
            assert len(r.experts) == 2 and abs(r.weights.sum() - 1.0) < 1e-9

    def test_deterministic_and_single_matches_batch(self, small_bundle, small_dataset):
        a = infer_images(small_dataset.test_X[:4], small_bundle)
        b = infer_images(small_dataset.test_X[:4], small_bundle)
        single = infer_image(small_dataset.test_X[2], small_bundle)
        for x, y in zip(a, b):
            assert x.anomaly_map.tobytes() == y.anomaly_map.tobytes()
        assert single.anomaly_map.tobytes() == a[2].anomaly_map.tobytes()

    def test_top_k_clipped_to_expert_count(self, small_bundle, small_dataset):
        r = infer_image(small_dataset.test_X[0], small_bundle, InferenceFlags(top_k=10))
        assert sorted(r.experts.tolist()) == [0, 1, 2]

    def test_channel_mismatch(self, small_bundle):
        with pytest.raises(DimensionError, match="channels"):
            infer_image(np.zeros((5, 6, 6), np.float32), small_bundle)

    @pytest.mark.slow
    def test_injected_anomaly_scores_higher(self, default_bundle, default_dataset):
        ds = default_dataset
        rng = np.random.default_rng(3)
        seen = [i for i in np.flatnonzero(ds.test_anomaly == 0) if ds.test_groups[i].startswith("seen")]
        wins = 0
        for i in seen:
            fmap = ds.test_X[i].copy()
            direction = rng.normal(size=fmap.shape[0])
            fmap[:, 2:4, 2:4] += (direction / np.linalg.norm(direction))[:, None, None]
            clean, dirty = infer_images(np.stack([ds.test_X[i], fmap]), default_bundle)
            wins += dirty.score > clean.score
        assert wins / len(seen) >= 0.9

    def test_constant_map_zero_head(self, tiny):
        b = train_model(tiny.train_X, tiny.train_y, TrainConfig(epochs=0, top_k=2), tiny.image_size)
        r = infer_image(np.ones((16, 6, 6), np.float32), b)
        np.testing.assert_array_equal(r.anomaly_map, 0.0)
        assert r.score == 0.0

    def test_anomaly_map_construction(self):
        scores = np.arange(4.0)
        m = build_anomaly_map(scores, (2, 2), (3, 3), smooth_sigma=0.0)
        np.testing.assert_allclose(m, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])
        smoothed = build_anomaly_map(scores, (2, 2), (8, 8), smooth_sigma=2.0)
        assert smoothed.shape == (8, 8) and smoothed.max() < 3.0

    def test_score_locations_shapes(self, small_bundle, small_dataset):
        s, chosen, weights = score_locations(small_dataset.test_X[:3], small_bundle,
                                             InferenceFlags(tta=False, top_k=1))
        assert s.shape == (3, 36)
        assert all(len(c) == 1 and w[0] == 1.0 for c, w in zip(chosen, weights))
