"""Long Monte Carlo runs on the full synthetic dataset (run with --runslow)."""
from pathlib import Path

import numpy as np
import pytest

from cmfactive.config import load_config
from cmfactive.datasets import generate_synthetic
from cmfactive.experiment import run_bounds, run_experiment, run_theorem_check
from cmfactive.schemas import Protocol, Relation, SelectorKind

pytestmark = pytest.mark.slow

BASELINES = (SelectorKind.UNCERTAINTY, SelectorKind.MAX_MODEL_CHANGE,
             SelectorKind.MIN_MODEL_CHANGE, SelectorKind.RANDOM)


@pytest.fixture(scope="module")
def synthetic_cfg():
    return load_config(Path(__file__).parent.parent / "data" / "synthetic.cfg")


@pytest.fixture(scope="module")
def synthetic(synthetic_cfg):
    return generate_synthetic(synthetic_cfg.synthetic(), synthetic_cfg.master_seed)


class TestBounds:
    """Test the lower / upper bound levels on the synthetic data."""

    def test_ratings_only_lower_bound(self, synthetic_cfg, synthetic):
        _, store = synthetic
        cfg = synthetic_cfg.experiment(Protocol.PERSONALIZED).model_copy(update={"relations": (Relation.R,)})
        lower, _ = run_bounds(cfg, store)
        assert lower == pytest.approx(0.60, abs=0.05)

    def test_collective_bounds(self, synthetic_cfg, synthetic):
        _, store = synthetic
        lower, upper = run_bounds(synthetic_cfg.experiment(Protocol.PERSONALIZED), store)
        assert lower == pytest.approx(0.760, abs=0.05)
        assert upper == pytest.approx(0.80, abs=0.05)
        assert upper >= lower


class TestCurves:
    """Test the ordering of selectors over whole runs."""

    def test_fisher_leads_baselines(self, synthetic_cfg, synthetic):
        """Test Fisher >= every baseline on at least 80% of iterations 5-25."""
        truth, store = synthetic
        result = run_experiment(synthetic_cfg.experiment(Protocol.PERSONALIZED), store, truth)
        fisher = result.table.curve(SelectorKind.FISHER)[5:]
        for kind in BASELINES:
            other = result.table.curve(kind)[5:]
            assert np.mean(fisher >= other) >= 0.8, kind.value

    def test_cold_start_climbs_from_guessing(self, synthetic_cfg, synthetic):
        """Test a start at coin-flip level on the rating labels, then a quick climb."""
        truth, store = synthetic
        positive = float(np.mean(store.select(store.indices_for([Relation.R])).label == 1))
        coin_flip = 2 * positive / (2 * positive + 1)
        cfg = synthetic_cfg.experiment(Protocol.COLD_START, selectors=[SelectorKind.FISHER])
        curve = run_experiment(cfg, store, truth).table.curve(SelectorKind.FISHER)
        assert curve[0] == pytest.approx(coin_flip, abs=0.03)
        assert curve[2] >= 0.62

    def test_noise_lowers_curves(self, synthetic_cfg, synthetic):
        """Test that noisy answers never beat clean ones and Fisher ends above the baselines."""
        truth, store = synthetic
        clean = run_experiment(synthetic_cfg.experiment(Protocol.PERSONALIZED), store, truth)
        noisy = run_experiment(synthetic_cfg.experiment(Protocol.NOISY), store, truth)
        last = {kind: noisy.table.curve(kind)[25] for kind in SelectorKind}
        for kind in SelectorKind:
            assert last[kind] <= clean.table.curve(kind)[25] + 0.01, kind.value
        assert last[SelectorKind.FISHER] >= max(last[kind] for kind in BASELINES)


class TestExcessLossRatio:
    """Test that excess loss tracks its predicted 1/M rate."""

    def test_ratio_near_one(self, synthetic_cfg, synthetic):
        truth, store = synthetic
        frame = run_theorem_check(store, truth, sizes=(50, 100, 200), lambda_=synthetic_cfg.lambda_,
                                  redraws=200, n_users=3, seed=synthetic_cfg.master_seed)
        means = frame.groupby("M")["ratio"].mean()
        assert means.between(0.5, 1.5).all()
        assert abs(means[200] - 1) <= abs(means[50] - 1)
