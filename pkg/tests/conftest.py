"""
Shared pytest fixtures for cmfactive tests.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from cmfactive.datasets import generate_synthetic
from cmfactive.model import LatentMatrix
from cmfactive.schemas import Hyperparams, Relation, SyntheticConfig
from cmfactive.store import RelationalStore

DATA_DIR = Path(__file__).parent.parent / "data"


# =============================================================================
# Slow-test switch
# =============================================================================

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Run the long Monte Carlo reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# Shared Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_store():
    """Two users, three businesses, two categories, a handful of triples."""
    store = RelationalStore()
    store.add_relation(Relation.R, "b0", "u0", 1)
    store.add_relation(Relation.R, "b1", "u0", -1)
    store.add_relation(Relation.R, "b2", "u0", 1)
    store.add_relation(Relation.R, "b0", "u1", -1)
    store.add_relation(Relation.R, "b2", "u1", 1)
    store.add_relation(Relation.BC, "b0", "c0", 1)
    store.add_relation(Relation.BC, "b2", "c1", 1)
    store.add_relation(Relation.UC, "u0", "c0", 1)
    store.add_relation(Relation.UC, "u1", "c1", -1)
    return store


@pytest.fixture
def small_synthetic():
    """(truth, store) for a 12 x 15 x 6 synthetic dataset, k = 3."""
    cfg = SyntheticConfig(n_users=12, n_businesses=15, n_categories=6, k=3)
    return generate_synthetic(cfg, seed=5)


@pytest.fixture
def fast_hyperparams():
    return Hyperparams(k=3, epochs=30)


@pytest.fixture
def random_latent(rng):
    """LatentMatrix of 1 user (id 0) and 10 entities, k = 3."""
    return LatentMatrix(rng.normal(0.2, 0.6, size=(11, 3)))


@pytest.fixture
def data_dir():
    return DATA_DIR

