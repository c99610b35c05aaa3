"""
Fisher-information question selection.

For a user u with estimate phi_u, the Hessian of one observation on entity e is
H(phi_e, phi_u) = sigmoid(s) sigmoid(-s) phi_e phi_e^T with s = phi_e . phi_u; it does
not depend on the label. The excess loss of the refitted estimator after asking the
question set Q is governed by Tr((I_Q + lambda I)^-1 I_S), where I_X is the average
Hessian over X and S is the user's unlabeled pool. Selection minimizes that trace.

Every H is rank one, so the greedy search evaluates each candidate with a
Sherman-Morrison update in O(k^2).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .errors import DataError, NumericalError
from .model import LatentMatrix
from .schemas import SelectionResult, SelectorKind

logger = logging.getLogger("CMFActive.Fisher")

# Sherman-Morrison denominators at or below this are treated as singular
MIN_DENOMINATOR = 1e-14


class ApproxVariant(str, Enum):
    A_INVERSE = "a-inverse"
    MAX_TRACE = "max-trace"


@dataclass(frozen=True)
class FisherMatrix:
    """Average observation Hessian over `count` entities."""
    matrix: np.ndarray
    count: int


def observation_weights(entity_vectors: np.ndarray, phi_u: np.ndarray) -> np.ndarray:
    """sigmoid(s) sigmoid(-s) per entity row."""
    s = entity_vectors @ phi_u
    return expit(s) * expit(-s)


def hessian_term(phi_e: np.ndarray, phi_u: np.ndarray) -> np.ndarray:
    phi_e = np.asarray(phi_e, dtype=np.float64)
    phi_u = np.asarray(phi_u, dtype=np.float64)
    if phi_e.shape != phi_u.shape:
        raise DataError(f"Dimension mismatch: {phi_e.shape} vs {phi_u.shape}")
    s = phi_e @ phi_u
    return expit(s) * expit(-s) * np.outer(phi_e, phi_e)


def _average_information(E: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (E * w[:, None]).T @ E / E.shape[0]


def fisher_info(entities: Sequence[int], phi: LatentMatrix, user: int) -> FisherMatrix:
    """I_S(phi_u): the mean of hessian_term over `entities` (repeats count)."""
    ids = np.asarray(list(entities), dtype=np.int64)
    if ids.size == 0:
        raise DataError("Fisher information needs a nonempty entity set")
    E = phi.vectors[ids]
    w = observation_weights(E, phi.vectors[user])
    return FisherMatrix(matrix=_average_information(E, w), count=int(ids.size))


def trace_objective(Q: Sequence[int], S: Sequence[int], phi: LatentMatrix, user: int, lambda_: float) -> float:
    """Tr((I_Q + lambda I)^-1 I_S); I_Q is zero for an empty Q."""
    if lambda_ <= 0:
        raise DataError("lambda must be positive")
    k = phi.k
    info_q = fisher_info(Q, phi, user).matrix if len(Q) else np.zeros((k, k))
    info_s = fisher_info(S, phi, user).matrix
    factor = cho_factor(info_q + lambda_ * np.eye(k))
    return float(np.trace(cho_solve(factor, info_s)))


def incremental_inverse_update(a_inv: np.ndarray, v: np.ndarray, w: float) -> np.ndarray:
    """(A + w v v^T)^-1 from A^-1 by Sherman-Morrison."""
    left = a_inv @ v
    right = v @ a_inv
    denominator = 1.0 + w * (v @ left)
    if denominator <= MIN_DENOMINATOR:
        raise NumericalError("Singular rank-one update", {"denominator": float(denominator)})
    return a_inv - w * np.outer(left, right) / denominator


def validate_pool(pool: Iterable[int], M: int) -> np.ndarray:
    ids = np.array(sorted(set(int(e) for e in pool)), dtype=np.int64)
    if M <= 0:
        raise DataError(f"Question budget must be positive, got M={M}")
    if M > ids.size:
        raise DataError(f"Question budget M={M} exceeds pool size {ids.size}")
    return ids


def greedy_trace_selection(E: np.ndarray, w: np.ndarray, M: int, lambda_: float,
                           target: np.ndarray) -> Tuple[List[int], List[float]]:
    """
    Greedy forward minimization of Tr((sum_Q H + M lambda I)^-1 target).

    E and w hold candidate rows sorted by EntityId, so argmax ties resolve to the
    lowest id. Returns chosen row positions and M * criterion after each step.
    """
    k = E.shape[1]
    a_inv = np.eye(k) / (M * lambda_)
    available = np.ones(E.shape[0], dtype=bool)
    chosen: List[int] = []
    steps: List[float] = []
    for _ in range(M):
        U = E @ a_inv
        quad = np.einsum("ij,ij->i", U, E)
        num = np.einsum("ij,jk,ik->i", U, target, U)
        gain = w * num / (1.0 + w * quad)
        gain[~available] = -np.inf
        j = int(np.argmax(gain))
        a_inv = incremental_inverse_update(a_inv, E[j], w[j])
        available[j] = False
        chosen.append(j)
        steps.append(M * float(np.trace(a_inv @ target)))
    return chosen, steps


def select_fisher(pool: Iterable[int], M: int, phi: LatentMatrix, user: int, lambda_: float,
                  target_information: Optional[np.ndarray] = None) -> SelectionResult:
    """
    Pick M pool entities minimizing Tr((I_Q + lambda I)^-1 I_S), S = pool.

    `target_information` overrides I_S (e.g. to cover a different set). The reported
    objective is in the averaged form Tr((I_Q + lambda I)^-1 I_S).
    """
    if lambda_ <= 0:
        raise DataError("lambda must be positive")
    ids = validate_pool(pool, M)
    E = phi.vectors[ids]
    w = observation_weights(E, phi.vectors[user])
    target = _average_information(E, w) if target_information is None else np.asarray(target_information)
    chosen, steps = greedy_trace_selection(E, w, M, lambda_, target)
    return SelectionResult(
        chosen=[int(ids[j]) for j in chosen],
        objective_value=steps[-1],
        strategy=SelectorKind.FISHER,
        step_objectives=steps,
    )


def select_approx(pool: Iterable[int], M: int, phi: LatentMatrix, user: int, lambda_: float,
                  variant: ApproxVariant) -> SelectionResult:
    """Cheaper surrogates: minimize Tr((I_Q + lambda I)^-1), or maximize Tr(I_Q + lambda I)."""
    if lambda_ <= 0:
        raise DataError("lambda must be positive")
    variant = ApproxVariant(variant)
    ids = validate_pool(pool, M)
    E = phi.vectors[ids]
    w = observation_weights(E, phi.vectors[user])

    if variant == ApproxVariant.A_INVERSE:
        chosen, steps = greedy_trace_selection(E, w, M, lambda_, np.eye(phi.k))
        return SelectionResult(
            chosen=[int(ids[j]) for j in chosen],
            objective_value=steps[-1],
            strategy=SelectorKind.APPROX_A_INVERSE,
            step_objectives=steps,
        )

    # Tr(H_e) = w_e ||phi_e||^2, so the trace of a set is additive
    trace = w * np.einsum("ij,ij->i", E, E)
    order = np.lexsort((ids, -trace))[:M]
    return SelectionResult(
        chosen=[int(ids[j]) for j in order],
        objective_value=float(trace[order].mean() + phi.k * lambda_),
        strategy=SelectorKind.APPROX_MAX_TRACE,
        step_objectives=[float(trace[order[:i + 1]].mean() + phi.k * lambda_) for i in range(M)],
    )
