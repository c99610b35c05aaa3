"""
Active-learning experiment harness.

A run repeats `mc_trials` independent Monte Carlo trials. Within a trial every selector
starts from the same split, the same initial model, the same sampled users and the
same oracle, so F1 differences come from question selection alone.

Trial layout (personalized / noisy):
    1. split each user's triples into train / test / pool
    2. train the initial model on train (lower bound) and the reference model on
       train + pool (upper bound, and the pretrained oracle)
    3. for every iteration: sample a fraction of users, let each selector ask them
       M questions, answer through the oracle, update that selector's model
    4. F1 on the held-out rating triples after every iteration

Cold start holds out whole users instead and asks every cold user each round.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple
import logging
import math

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .config import (
    SEED_OFFSET_INIT, SEED_OFFSET_ORACLE, SEED_OFFSET_RANDOM, SEED_OFFSET_SPLIT,
    SEED_OFFSET_USERS, TRIAL_SEED_STRIDE,
)
from .errors import DataError, NumericalError
from .fisher import fisher_info
from .logger_config import RunStats, get_stats
from .model import LatentMatrix, evaluate_f1, fit_user_vector, refit_user, sgd_train
from .results import EXCESS_LOSS_COLUMNS, SELECTION_COLUMNS, TRACE_COLUMNS, ResultTable
from .schemas import (
    EntityKind, ExperimentConfig, OracleMode, Protocol, Relation, RELATION_CODES, ResultRow,
    SelectorKind,
)
from .selectors import run_selector
from .splits import Split, relation_mask, split_cold_start, split_personalized
from .store import RelationalStore, TripleArrays

logger = logging.getLogger("CMFActive.Experiment")


# =============================================================================
# Session state and oracle
# =============================================================================

@dataclass
class ALSessionState:
    """One user's labeled set, remaining pool and question history for one selector."""
    user: int
    labeled: Dict[int, int]
    pool: Set[int]
    asked: List[int] = field(default_factory=list)
    iteration: int = 0

    def record(self, entity: int, label: int) -> None:
        if entity not in self.pool:
            raise DataError(f"Entity {entity} is not in the pool of user {self.user}")
        self.pool.remove(entity)
        self.labeled[entity] = label
        self.asked.append(entity)


def trial_seed(master_seed: int, trial: int) -> int:
    return master_seed + trial * TRIAL_SEED_STRIDE


def oracle_answer(mode: OracleMode, user: int, entity: int, relation: Relation, trial_seed: int,
                  reference: Optional[LatentMatrix] = None, truth: Optional[LatentMatrix] = None) -> int:
    """
    Simulated user response to "does `user` relate to `entity`?".

    PRETRAINED thresholds the reference model at 0.5. NOISY_GROUND_TRUTH draws
    +1 with probability sigmoid(phi*_e . phi*_u), seeded by (trial_seed, user, entity).
    """
    mode = OracleMode(mode)
    if Relation(relation) == Relation.BC:
        raise DataError("Only user relations (R, UC) can be asked")
    if mode == OracleMode.PRETRAINED:
        if reference is None:
            raise DataError("Pretrained oracle needs a reference model")
        s = reference.vectors[entity] @ reference.vectors[user]
        return 1 if expit(s) > 0.5 else -1
    if truth is None:
        raise DataError("Ground truth required for the noisy oracle")
    rng = np.random.default_rng([trial_seed, SEED_OFFSET_ORACLE, user, entity])
    p = expit(truth.vectors[entity] @ truth.vectors[user])
    return 1 if rng.random() < p else -1


def _relation_for(store: RelationalStore, entity: int) -> Relation:
    return Relation.R if store.kind_of(entity) == EntityKind.BUSINESS else Relation.UC


def _answered_triple(store: RelationalStore, user: int, entity: int, label: int) -> Tuple[int, int, int, float]:
    relation = _relation_for(store, entity)
    first, second = (entity, user) if relation == Relation.R else (user, entity)
    return RELATION_CODES[relation], first, second, float(label)


def _to_arrays(rows: Sequence[Tuple[int, int, int, float]]) -> TripleArrays:
    if not rows:
        return TripleArrays.empty()
    relation, first, second, label = zip(*rows)
    return TripleArrays(
        relation=np.array(relation, dtype=np.int8),
        first=np.array(first, dtype=np.int64),
        second=np.array(second, dtype=np.int64),
        label=np.array(label, dtype=np.float64),
    )


# =============================================================================
# Monte Carlo aggregation
# =============================================================================

def aggregate_mc(per_trial_f1) -> Tuple[np.ndarray, np.ndarray]:
    """Column means and sample standard deviations (0 for a single trial)."""
    rows = [np.asarray(r, dtype=np.float64) for r in per_trial_f1]
    if not rows:
        raise DataError("No trials to aggregate")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise DataError("Ragged per-trial results")
    matrix = np.vstack(rows)
    means = matrix.mean(axis=0)
    if matrix.shape[0] == 1:
        return means, np.zeros_like(means)
    return means, matrix.std(axis=0, ddof=1)


# =============================================================================
# One trial
# =============================================================================

@dataclass
class TrialOutcome:
    curves: Dict[SelectorKind, List[float]]
    lower: float
    upper: float
    selections: List[dict]
    stats: RunStats


@dataclass
class ExperimentResult:
    table: ResultTable
    lower: float
    upper: float
    trace: pd.DataFrame
    selections: pd.DataFrame


def _make_split(store: RelationalStore, cfg: ExperimentConfig, seed: int) -> Split:
    if cfg.protocol == Protocol.COLD_START:
        return split_cold_start(store, cfg.cold_frac, seed + SEED_OFFSET_SPLIT, cfg.relations)
    return split_personalized(store, cfg.test_frac, cfg.train_frac, seed + SEED_OFFSET_SPLIT, cfg.relations)


def _rating_test(store: RelationalStore, split: Split) -> TripleArrays:
    test = split.test[relation_mask(store, split.test, Relation.R)]
    if test.size == 0:
        raise DataError("The split left no rating triples to evaluate on")
    return store.select(test)


def _train_bounds(store: RelationalStore, cfg: ExperimentConfig, split: Split, seed: int,
                  stats: RunStats) -> Tuple[LatentMatrix, LatentMatrix]:
    """Initial model (train only) and reference model (train + pool)."""
    hp = cfg.hyperparams
    train = store.select(split.train)
    initial = sgd_train(train, store.n_entities, hp, seed + SEED_OFFSET_INIT)
    reference = sgd_train(train.concat(store.select(split.pool)), store.n_entities, hp, seed + SEED_OFFSET_INIT)
    stats.record_training()
    stats.record_training()
    return initial, reference


def _sessions(store: RelationalStore, split: Split) -> Dict[int, ALSessionState]:
    """Fresh per-user sessions: train triples are labeled, pool triples unlabeled."""
    sessions: Dict[int, ALSessionState] = {}
    arrays = store.arrays
    train_users, train_items = store.user_item(split.train)
    for user, item, idx in zip(train_users, train_items, split.train):
        if user < 0:
            continue
        sessions.setdefault(int(user), ALSessionState(int(user), {}, set())).labeled[int(item)] = int(arrays.label[idx])
    pool_users, pool_items = store.user_item(split.pool)
    for user, item in zip(pool_users, pool_items):
        sessions.setdefault(int(user), ALSessionState(int(user), {}, set())).pool.add(int(item))
    return {u: s for u, s in sessions.items() if s.pool}


def user_prior(lambda_: float, n_labeled: int) -> float:
    """Summed-loss prior weight for a user refit on the averaged loss over n_labeled answers."""
    return lambda_ * n_labeled


def _copy_sessions(sessions: Dict[int, ALSessionState]) -> Dict[int, ALSessionState]:
    return {u: ALSessionState(u, dict(s.labeled), set(s.pool)) for u, s in sessions.items()}


def _sample_users(cfg: ExperimentConfig, eligible: List[int], seed: int, iteration: int) -> List[int]:
    if not eligible:
        return []
    if cfg.protocol == Protocol.COLD_START:
        return eligible
    n_ask = int(math.floor(cfg.user_fraction * len(eligible) + 1e-9))
    if n_ask == 0:
        return []
    rng = np.random.default_rng([seed, SEED_OFFSET_USERS, iteration])
    return sorted(int(u) for u in rng.choice(eligible, size=n_ask, replace=False))


def _run_trial(store: RelationalStore, cfg: ExperimentConfig, trial: int,
               truth: Optional[LatentMatrix]) -> TrialOutcome:
    seed = trial_seed(cfg.master_seed, trial)
    stats = RunStats()
    stats.record_trial()
    hp = cfg.hyperparams
    M = cfg.questions_per_round

    split = _make_split(store, cfg, seed)
    test = _rating_test(store, split)
    initial, reference = _train_bounds(store, cfg, split, seed, stats)
    lower = evaluate_f1(initial, test)
    upper = evaluate_f1(reference, test)

    base_sessions = _sessions(store, split)
    if cfg.protocol == Protocol.COLD_START:
        base_sessions = {u: s for u, s in base_sessions.items() if u in split.cold_users}
    train = store.select(split.train)

    models = {kind: initial for kind in cfg.selectors}
    sessions = {kind: _copy_sessions(base_sessions) for kind in cfg.selectors}
    answered: Dict[SelectorKind, List[Tuple[int, int, int, float]]] = {kind: [] for kind in cfg.selectors}
    curves = {kind: [lower] for kind in cfg.selectors}
    selections: List[dict] = []
    remaining = {u: len(s.pool) for u, s in base_sessions.items()}

    for iteration in range(1, cfg.iterations + 1):
        eligible = sorted(u for u, n in remaining.items() if n >= M)
        users = _sample_users(cfg, eligible, seed, iteration)
        for user in users:
            remaining[user] -= M

        for kind in cfg.selectors:
            latent = models[kind]
            updates: Dict[int, np.ndarray] = {}
            for user in users:
                session = sessions[kind][user]
                result = run_selector(
                    kind, session.pool, M, latent, user,
                    lambda_=user_prior(hp.lambda_, len(session.labeled) + M) / M, eta=hp.eta,
                    seed=[seed, SEED_OFFSET_RANDOM, iteration, user],
                )
                stats.record_selection(kind.value, M)
                for step, entity in enumerate(result.chosen):
                    relation = _relation_for(store, entity)
                    label = oracle_answer(cfg.oracle_mode, user, entity, relation, seed,
                                          reference=reference, truth=truth)
                    session.record(entity, label)
                    answered[kind].append(_answered_triple(store, user, entity, label))
                    if cfg.record_selections:
                        objective = result.step_objectives[step] if result.step_objectives else result.objective_value
                        selections.append({
                            "trial": trial, "selector": kind.value, "iteration": iteration,
                            "user": store.qualified_key(user), "step": step,
                            "entity": store.qualified_key(entity), "objective": objective,
                        })
                session.iteration = iteration

            retrain = (cfg.full_retrain_every > 0 and cfg.protocol != Protocol.COLD_START
                       and iteration % cfg.full_retrain_every == 0)
            if retrain:
                latent = sgd_train(train.concat(_to_arrays(answered[kind])), store.n_entities, hp,
                                   seed + SEED_OFFSET_INIT, init=latent)
                stats.record_training()
                stats.record_event("full_retrain", f"{kind.value} at iteration {iteration}")
            else:
                for user in users:
                    try:
                        updates[user] = refit_user(
                            user, sessions[kind][user].labeled, latent,
                            user_prior(hp.lambda_, len(sessions[kind][user].labeled)),
                        )
                    except NumericalError:
                        stats.record_numerical_failure()
                        raise
                stats.record_refit(len(users))
                if updates:
                    latent = latent.with_vectors(updates)
            models[kind] = latent
            curves[kind].append(evaluate_f1(latent, test))

    logger.debug(f"Trial {trial}: lower={lower:.4f} upper={upper:.4f}")
    return TrialOutcome(curves=curves, lower=lower, upper=upper, selections=selections, stats=stats)


# =============================================================================
# Protocols
# =============================================================================

def _run_trials(store: RelationalStore, cfg: ExperimentConfig,
                truth: Optional[LatentMatrix]) -> ExperimentResult:
    logger.info(f"Running {cfg.protocol.value}: {cfg.mc_trials} trials x {cfg.iterations} iterations, "
                f"selectors={[s.value for s in cfg.selectors]}")
    outcomes = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_run_trial)(store, cfg, trial, truth) for trial in range(cfg.mc_trials)
    )

    stats = get_stats()
    for outcome in outcomes:
        stats.merge(outcome.stats)

    rows: List[ResultRow] = []
    trace: List[dict] = []
    for kind in cfg.selectors:
        per_trial = [o.curves[kind] for o in outcomes]
        means, stds = aggregate_mc(per_trial)
        for iteration, (mean, std) in enumerate(zip(means, stds)):
            rows.append(ResultRow(selector=kind, iteration=iteration, f1_mean=float(mean),
                                  f1_std=float(std), n_trials=len(outcomes)))
        for trial, curve in enumerate(per_trial):
            trace.extend({"trial": trial, "selector": kind.value, "iteration": i, "f1": f}
                         for i, f in enumerate(curve))

    lower = float(np.mean([o.lower for o in outcomes]))
    upper = float(np.mean([o.upper for o in outcomes]))
    logger.info(f"Bounds over {len(outcomes)} trials: lower={lower:.4f} upper={upper:.4f}")
    return ExperimentResult(
        table=ResultTable(rows),
        lower=lower,
        upper=upper,
        trace=pd.DataFrame(trace, columns=TRACE_COLUMNS),
        selections=pd.DataFrame([s for o in outcomes for s in o.selections], columns=SELECTION_COLUMNS),
    )


def _check_protocol(cfg: ExperimentConfig, expected: Protocol) -> None:
    if cfg.protocol != expected:
        raise DataError(f"Config is for protocol '{cfg.protocol.value}', not '{expected.value}'")


def run_personalized(cfg: ExperimentConfig, store: RelationalStore,
                     truth: Optional[LatentMatrix] = None) -> ExperimentResult:
    """Personalized active learning with the pretrained oracle."""
    _check_protocol(cfg, Protocol.PERSONALIZED)
    return _run_trials(store, cfg, truth)


def run_cold_start(cfg: ExperimentConfig, store: RelationalStore,
                   truth: Optional[LatentMatrix] = None) -> ExperimentResult:
    """Cold-start users: one question each per round, refitting their vectors only."""
    _check_protocol(cfg, Protocol.COLD_START)
    return _run_trials(store, cfg, truth)


def run_noisy(cfg: ExperimentConfig, store: RelationalStore,
              truth: Optional[LatentMatrix] = None) -> ExperimentResult:
    """Personalized loop answered by Bernoulli draws from the ground-truth factors."""
    _check_protocol(cfg, Protocol.NOISY)
    if truth is None:
        raise DataError("Ground truth required for the noisy protocol")
    if truth.n_entities != store.n_entities:
        raise DataError(f"Ground truth covers {truth.n_entities} entities, store has {store.n_entities}")
    return _run_trials(store, cfg, truth)


PROTOCOLS: Dict[Protocol, Callable[..., ExperimentResult]] = {
    Protocol.PERSONALIZED: run_personalized,
    Protocol.COLD_START: run_cold_start,
    Protocol.NOISY: run_noisy,
}


def run_experiment(cfg: ExperimentConfig, store: RelationalStore,
                   truth: Optional[LatentMatrix] = None) -> ExperimentResult:
    handler = PROTOCOLS.get(cfg.protocol)
    if handler is None:
        raise DataError(f"Unknown protocol: {cfg.protocol}")
    return handler(cfg, store, truth)


def _bounds_trial(store: RelationalStore, cfg: ExperimentConfig, trial: int) -> Tuple[float, float, RunStats]:
    seed = trial_seed(cfg.master_seed, trial)
    stats = RunStats()
    split = _make_split(store, cfg, seed)
    test = _rating_test(store, split)
    initial, reference = _train_bounds(store, cfg, split, seed, stats)
    return evaluate_f1(initial, test), evaluate_f1(reference, test), stats


def run_bounds(cfg: ExperimentConfig, store: RelationalStore) -> Tuple[float, float]:
    """Mean (lower, upper) F1 over trials: initial-split model vs. all-training-data model."""
    outcomes = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_bounds_trial)(store, cfg, trial) for trial in range(cfg.mc_trials)
    )
    stats = get_stats()
    for _, _, trial_stats in outcomes:
        stats.merge(trial_stats)
    lower = float(np.mean([o[0] for o in outcomes]))
    upper = float(np.mean([o[1] for o in outcomes]))
    return lower, upper


# =============================================================================
# Excess-loss consistency check
# =============================================================================

def _population_loss(phi_u: np.ndarray, E: np.ndarray, p: np.ndarray) -> float:
    """Mean expected logistic loss over S when answers follow probabilities p."""
    s = E @ phi_u
    return float(np.mean(p * np.logaddexp(0.0, -s) + (1.0 - p) * np.logaddexp(0.0, s)))


def user_candidates(store: RelationalStore, user: int) -> np.ndarray:
    """Entities the user is related to through R or UC, ascending."""
    users, items = store.user_item(np.arange(store.n_triples))
    return np.unique(items[users == user])


@dataclass(frozen=True)
class ExcessLossCheck:
    user: int
    M: int
    excess_loss: float
    predicted: float

    @property
    def ratio(self) -> float:
        return self.excess_loss / self.predicted


def excess_loss_ratio(truth: LatentMatrix, user: int, S: Sequence[int], M: int, lambda_: float,
                      redraws: int, seed: int) -> ExcessLossCheck:
    """
    Compare the Monte Carlo excess loss of the refitted user vector with tau^2 / M.

    Q is M draws (with replacement) from S, fixed for all redraws; each redraw samples
    fresh answers from the true factors, refits phi_u with entity vectors at their
    true values, and measures L_S(phi_hat) - L_S(phi*) under the true answer
    probabilities. tau^2 = 1/2 Tr((I_Q(phi*) + (lambda / M) I)^-1 I_S(phi*)).
    """
    S = np.asarray(S, dtype=np.int64)
    if S.size == 0:
        raise DataError(f"User {user} has no candidate entities")
    if M <= 0 or redraws <= 0:
        raise DataError("M and redraws must be positive")
    rng = np.random.default_rng([seed, user, M])
    Q = rng.choice(S, size=M, replace=True)

    phi_star = truth.vectors[user]
    E_S = truth.vectors[S]
    p_S = expit(E_S @ phi_star)
    E_Q = truth.vectors[Q]
    p_Q = expit(E_Q @ phi_star)
    baseline = _population_loss(phi_star, E_S, p_S)

    excess = np.empty(redraws)
    for r in range(redraws):
        y = np.where(rng.random(M) < p_Q, 1.0, -1.0)
        phi_hat = fit_user_vector(E_Q, y, lambda_, np.zeros(truth.k), context={"user": user, "redraw": r})
        excess[r] = _population_loss(phi_hat, E_S, p_S) - baseline

    info_q = fisher_info(Q, truth, user).matrix
    info_s = fisher_info(S, truth, user).matrix
    factor = cho_factor(info_q + (lambda_ / M) * np.eye(truth.k))
    tau2 = 0.5 * float(np.trace(cho_solve(factor, info_s)))
    return ExcessLossCheck(user=user, M=M, excess_loss=float(excess.mean()), predicted=tau2 / M)


def run_theorem_check(store: RelationalStore, truth: LatentMatrix, sizes: Sequence[int], lambda_: float,
                      redraws: int, n_users: int, seed: int) -> pd.DataFrame:
    """Excess-loss ratios for the first `n_users` users at every question-set size."""
    users = store.entities_of_kind(EntityKind.USER)[:n_users]
    rows = []
    for M in sizes:
        for user in users:
            check = excess_loss_ratio(truth, int(user), user_candidates(store, int(user)), int(M),
                                      lambda_, redraws, seed)
            rows.append({"user": store.qualified_key(int(user)), "M": int(M), "excess_loss": check.excess_loss,
                         "predicted": check.predicted, "ratio": check.ratio})
            logger.info(f"M={M} {store.qualified_key(int(user))}: ratio {check.ratio:.3f}")
    return pd.DataFrame(rows, columns=EXCESS_LOSS_COLUMNS)
