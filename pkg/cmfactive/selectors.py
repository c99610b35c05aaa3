"""
Baseline question selectors and the dispatch table shared by every strategy.

Each selector takes a user's pool and returns M distinct pool entities; every ranking
breaks ties by the lowest EntityId.
"""
from enum import Enum
from typing import Callable, Dict, Iterable
import logging

import numpy as np
from scipy.special import expit

from .errors import DataError
from .fisher import ApproxVariant, validate_pool, select_approx, select_fisher
from .model import LatentMatrix
from .schemas import SelectionResult, SelectorKind

logger = logging.getLogger("CMFActive.Selectors")


class Direction(str, Enum):
    MAX = "max"
    MIN = "min"


def _top(ids: np.ndarray, score: np.ndarray, M: int) -> np.ndarray:
    """Positions of the M highest scores, lowest id first among equals."""
    return np.lexsort((ids, -score))[:M]


def select_uncertainty(pool: Iterable[int], M: int, phi: LatentMatrix, user: int) -> SelectionResult:
    """Top-M by Bernoulli variance p(1 - p) of the predicted answer."""
    ids = validate_pool(pool, M)
    s = phi.vectors[ids] @ phi.vectors[user]
    # p (1 - p), exactly symmetric in s
    variance = expit(s) * expit(-s)
    order = _top(ids, variance, M)
    return SelectionResult(
        chosen=[int(ids[j]) for j in order],
        objective_value=float(variance[order].sum()),
        strategy=SelectorKind.UNCERTAINTY,
    )


def model_change_scores(E: np.ndarray, phi_u: np.ndarray, eta: float) -> np.ndarray:
    """Expected norm of one SGD step on phi_u: 2 eta sigmoid(s) sigmoid(-s) ||phi_e||."""
    s = E @ phi_u
    return 2.0 * eta * expit(s) * expit(-s) * np.linalg.norm(E, axis=1)


def select_model_change(pool: Iterable[int], M: int, phi: LatentMatrix, user: int, eta: float,
                        direction: Direction) -> SelectionResult:
    """Top-M (MAX) or bottom-M (MIN) by expected single-step model change."""
    direction = Direction(direction)
    if eta <= 0:
        raise DataError("eta must be positive")
    ids = validate_pool(pool, M)
    score = model_change_scores(phi.vectors[ids], phi.vectors[user], eta)
    if direction == Direction.MAX:
        order = _top(ids, score, M)
        kind = SelectorKind.MAX_MODEL_CHANGE
    else:
        order = np.lexsort((ids, score))[:M]
        kind = SelectorKind.MIN_MODEL_CHANGE
    return SelectionResult(
        chosen=[int(ids[j]) for j in order],
        objective_value=float(score[order].sum()),
        strategy=kind,
    )


def select_random(pool: Iterable[int], M: int, seed) -> SelectionResult:
    """Uniform sample without replacement; `seed` is anything numpy accepts as a seed."""
    ids = validate_pool(pool, M)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(ids, size=M, replace=False)
    return SelectionResult(
        chosen=[int(e) for e in chosen],
        objective_value=float("nan"),
        strategy=SelectorKind.RANDOM,
    )


# =============================================================================
# Dispatch
# =============================================================================

SelectorFn = Callable[..., SelectionResult]

SELECTORS: Dict[SelectorKind, SelectorFn] = {
    SelectorKind.FISHER: lambda pool, M, phi, user, lambda_, eta, seed:
        select_fisher(pool, M, phi, user, lambda_),
    SelectorKind.APPROX_A_INVERSE: lambda pool, M, phi, user, lambda_, eta, seed:
        select_approx(pool, M, phi, user, lambda_, ApproxVariant.A_INVERSE),
    SelectorKind.APPROX_MAX_TRACE: lambda pool, M, phi, user, lambda_, eta, seed:
        select_approx(pool, M, phi, user, lambda_, ApproxVariant.MAX_TRACE),
    SelectorKind.UNCERTAINTY: lambda pool, M, phi, user, lambda_, eta, seed:
        select_uncertainty(pool, M, phi, user),
    SelectorKind.MAX_MODEL_CHANGE: lambda pool, M, phi, user, lambda_, eta, seed:
        select_model_change(pool, M, phi, user, eta, Direction.MAX),
    SelectorKind.MIN_MODEL_CHANGE: lambda pool, M, phi, user, lambda_, eta, seed:
        select_model_change(pool, M, phi, user, eta, Direction.MIN),
    SelectorKind.RANDOM: lambda pool, M, phi, user, lambda_, eta, seed:
        select_random(pool, M, seed),
}


def run_selector(kind: SelectorKind, pool: Iterable[int], M: int, phi: LatentMatrix, user: int, *,
                 lambda_: float, eta: float, seed=None) -> SelectionResult:
    """
    Run one strategy for one user.

    Args:
        kind: Strategy to run
        pool: Candidate entities (the user's unlabeled set)
        M: Number of questions
        phi: Current model snapshot
        user: The user being queried
        lambda_: Averaged-form prior weight for the Fisher criteria
        eta: SGD step size for the model-change scores
        seed: Seed for RANDOM; ignored by the deterministic strategies
    """
    handler = SELECTORS.get(SelectorKind(kind))
    if handler is None:
        raise DataError(f"Unknown selector: {kind}")
    result = handler(pool, M, phi, user, lambda_, eta, seed)
    logger.debug(f"{result.strategy.value} picked {result.chosen} for user {user}")
    return result
