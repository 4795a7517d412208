import numpy as np
import pytest

from adapted_moe import SyntheticConfig, TrainConfig, generate_synthetic_dataset, train_model

SMALL_DATA = dict(channels=16, n_subclasses=3, n_unseen=1, train_per_subclass=8,
                  grid=(6, 6), image_size=(12, 12))
# a short schedule with a raised learning rate so small fixtures actually learn
FAST_TRAIN = dict(epochs=100, lr_start=1e-2, lr_end=1e-2, top_k=2, smooth_sigma=1.0)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(SyntheticConfig(**SMALL_DATA))


@pytest.fixture(scope="session")
def small_bundle(small_dataset):
    ds = small_dataset
    return train_model(ds.train_X, ds.train_y, TrainConfig(**FAST_TRAIN), ds.image_size)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic_dataset(SyntheticConfig())


@pytest.fixture(scope="session")
def bundle_cache():
    """Bundles keyed like ``run_ablation``'s cache, shared across the session."""
    return {}


@pytest.fixture(scope="session")
def default_bundle(default_dataset, bundle_cache):
    key = (True, True, "center", 0)
    if key not in bundle_cache:
        ds = default_dataset
        bundle_cache[key] = train_model(ds.train_X, ds.train_y, TrainConfig(), ds.image_size)
    return bundle_cache[key]


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line and assert it; lines are echoed in the run summary."""

    def check(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
