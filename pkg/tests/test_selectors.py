"""Unit tests for the baseline selectors and the selector dispatch table."""
from collections import Counter

import numpy as np
import pytest
from scipy.special import expit

from cmfactive.errors import DataError
from cmfactive.model import LatentMatrix
from cmfactive.schemas import SelectorKind
from cmfactive.selectors import (
    Direction, SELECTORS, model_change_scores, run_selector, select_model_change,
    select_random, select_uncertainty,
)


def _scores_latent(scores):
    """User 0 = [1, 0]; entity i has score scores[i - 1] against it."""
    rows = [[1.0, 0.0]] + [[s, 0.0] for s in scores]
    return LatentMatrix(np.array(rows))


class TestUncertainty:
    """Test uncertainty sampling."""

    def test_picks_score_nearest_zero(self):
        latent = _scores_latent([0.1, 2.0, -3.0])
        assert select_uncertainty([1, 2, 3], 1, latent, 0).chosen == [1]

    def test_symmetric_probabilities_tie(self):
        """Test that p and 1 - p score alike; the lower id wins."""
        latent = _scores_latent([1.5, -1.5])
        assert select_uncertainty([2, 1], 1, latent, 0).chosen == [1]

    def test_matches_sort_oracle(self, rng):
        """Test the ranking against a plain sort by p(1 - p) on 20 candidates."""
        latent = LatentMatrix(rng.normal(size=(21, 4)))
        pool = list(range(1, 21))
        s = latent.vectors[pool] @ latent.vectors[0]
        expected = [pool[i] for i in np.argsort(-(expit(s) * expit(-s)), kind="stable")[:5]]
        assert select_uncertainty(pool, 5, latent, 0).chosen == expected

    def test_budget_too_large(self):
        with pytest.raises(DataError):
            select_uncertainty([1], 2, _scores_latent([0.0]), 0)


class TestModelChange:
    """Test expected model change scores."""

    def test_closed_form_score(self):
        """Test s = 0, ||phi_e|| = 1, eta = 0.02 gives 0.01."""
        score = model_change_scores(np.array([[0.0, 1.0]]), np.array([1.0, 0.0]), 0.02)
        assert score[0] == pytest.approx(0.01)

    def test_zero_entity_preferred_by_min(self):
        latent = LatentMatrix(np.array([[1.0, 1.0], [0.0, 0.0], [0.3, -0.2], [1.0, 2.0]]))
        assert select_model_change([1, 2, 3], 1, latent, 0, 0.02, Direction.MIN).chosen == [1]

    def test_extremes(self):
        """Test that MAX and MIN pick the largest and smallest scores."""
        latent = LatentMatrix(np.array([[0.0, 0.0], [0.02, 0.0], [0.06, 0.0], [0.004, 0.0]]))
        # with phi_u = 0 the scores are 0.01 * ||phi_e||: 0.0002, 0.0006, 0.00004
        high = select_model_change([1, 2, 3], 1, latent, 0, 0.02, Direction.MAX)
        low = select_model_change([1, 2, 3], 1, latent, 0, 0.02, Direction.MIN)
        assert high.chosen == [2]
        assert low.chosen == [3]
        assert high.strategy == SelectorKind.MAX_MODEL_CHANGE
        assert low.strategy == SelectorKind.MIN_MODEL_CHANGE

    def test_max_and_min_disjoint(self, rng):
        latent = LatentMatrix(rng.normal(size=(11, 3)))
        pool = list(range(1, 11))
        high = select_model_change(pool, 4, latent, 0, 0.02, Direction.MAX)
        low = select_model_change(pool, 4, latent, 0, 0.02, Direction.MIN)
        assert not set(high.chosen) & set(low.chosen)


class TestRandom:
    """Test uniform random selection."""

    def test_whole_pool(self):
        assert sorted(select_random([4, 2, 9], 3, seed=0).chosen) == [2, 4, 9]

    def test_deterministic(self):
        assert select_random(range(50), 5, seed=17).chosen == select_random(range(50), 5, seed=17).chosen

    def test_sequence_seed(self):
        """Test that a seed sequence works and is reproducible."""
        a = select_random(range(20), 3, seed=[1, 2, 3]).chosen
        assert a == select_random(range(20), 3, seed=[1, 2, 3]).chosen
        assert len(set(a)) == 3

    def test_uniform_frequencies(self):
        """Test each of 10 candidates is drawn about 10% of the time."""
        counts = Counter(select_random(range(10), 1, seed=s).chosen[0] for s in range(100_000))
        for entity in range(10):
            assert counts[entity] / 100_000 == pytest.approx(0.1, abs=0.005)

    def test_objective_is_nan(self):
        assert np.isnan(select_random([1, 2], 1, seed=0).objective_value)


class TestDispatch:
    """Test the shared selector interface."""

    def test_every_kind_registered(self):
        assert set(SELECTORS) == set(SelectorKind)

    @pytest.mark.parametrize("kind", list(SelectorKind))
    def test_returns_m_distinct_pool_members(self, kind, random_latent):
        pool = list(range(1, 11))
        result = run_selector(kind, pool, 4, random_latent, 0, lambda_=0.1, eta=0.02, seed=3)
        assert len(result.chosen) == 4
        assert len(set(result.chosen)) == 4
        assert set(result.chosen) <= set(pool)
        assert result.strategy == kind

    def test_accepts_string_kind(self, random_latent):
        result = run_selector("uncertainty", [1, 2, 3], 1, random_latent, 0, lambda_=0.1, eta=0.02)
        assert result.strategy == SelectorKind.UNCERTAINTY

    def test_unknown_kind(self, random_latent):
        with pytest.raises(ValueError):
            run_selector("oracle", [1, 2], 1, random_latent, 0, lambda_=0.1, eta=0.02)
