"""
Collective matrix factorization model.

Every entity owns one k-dimensional latent vector shared across all relations it
takes part in; P(y = +1 | e1, e2) = sigmoid(phi_e1 . phi_e2).

Training minimizes the summed logistic loss plus lambda * ||Phi||_F^2 (a Gaussian
prior with precision lambda), by per-triple SGD over the whole database; the epoch
count is picked on a held-out share of the triples. Per-user refits after active
questions use Newton's method with all other vectors frozen.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np
import pandas as pd
from numba import njit
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .config import NEWTON_GRAD_TOL, NEWTON_MAX_ITER
from .errors import DataError, NumericalError
from .schemas import Hyperparams
from .store import RelationalStore, TripleArrays

logger = logging.getLogger("CMFActive.Model")

# Armijo sufficient-decrease constant and floating-point slack for the Newton line search
ARMIJO_C = 1e-4
LINE_SEARCH_MIN_STEP = 1e-10


@dataclass(frozen=True)
class LatentMatrix:
    """Immutable snapshot of the latent factors; row e is phi_e."""
    vectors: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.vectors, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise DataError(f"Latent vectors must be a 2-d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError("Latent matrix contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @property
    def k(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def n_entities(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def matrix(self) -> np.ndarray:
        """Phi as a k x |E| matrix."""
        return self.vectors.T

    def vector(self, entity: int) -> np.ndarray:
        return self.vectors[entity]

    def with_vectors(self, updates: Mapping[int, np.ndarray]) -> "LatentMatrix":
        """New snapshot with the given rows replaced."""
        arr = self.vectors.copy()
        for entity, vec in updates.items():
            arr[entity] = vec
        return LatentMatrix(arr)

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.vectors))


# =============================================================================
# Pointwise model
# =============================================================================

def _check_pair(phi_1: np.ndarray, phi_2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    phi_1 = np.asarray(phi_1, dtype=np.float64)
    phi_2 = np.asarray(phi_2, dtype=np.float64)
    if phi_1.shape != phi_2.shape or phi_1.ndim != 1:
        raise DataError(f"Dimension mismatch: {phi_1.shape} vs {phi_2.shape}")
    return phi_1, phi_2


def predict_prob(phi_1: np.ndarray, phi_2: np.ndarray) -> float:
    """sigmoid(phi_1 . phi_2)."""
    phi_1, phi_2 = _check_pair(phi_1, phi_2)
    return float(expit(phi_1 @ phi_2))


def nll(y: int, phi_e: np.ndarray, phi_u: np.ndarray) -> float:
    """-log sigmoid(y * phi_e . phi_u), in the log(1 + exp(-ys)) form."""
    phi_e, phi_u = _check_pair(phi_e, phi_u)
    return float(np.logaddexp(0.0, -y * (phi_e @ phi_u)))


def grad_user(y: int, phi_e: np.ndarray, phi_u: np.ndarray) -> np.ndarray:
    """d nll / d phi_u = -y * sigmoid(-y s) * phi_e."""
    phi_e, phi_u = _check_pair(phi_e, phi_u)
    return -y * expit(-y * (phi_e @ phi_u)) * phi_e


def grad_entity(y: int, phi_e: np.ndarray, phi_u: np.ndarray) -> np.ndarray:
    """d nll / d phi_e = -y * sigmoid(-y s) * phi_u."""
    phi_e, phi_u = _check_pair(phi_e, phi_u)
    return -y * expit(-y * (phi_e @ phi_u)) * phi_u


def scores(latent: LatentMatrix, triples: TripleArrays) -> np.ndarray:
    """phi_first . phi_second for every triple."""
    v = latent.vectors
    return np.einsum("ij,ij->i", v[triples.first], v[triples.second])


def predict_labels(latent: LatentMatrix, triples: TripleArrays) -> np.ndarray:
    """+1 iff sigmoid(s) > 0.5; an exact 0.5 goes to -1."""
    return np.where(expit(scores(latent, triples)) > 0.5, 1, -1)


def objective(latent: LatentMatrix, triples: TripleArrays, lambda_: float) -> float:
    """Summed loss plus lambda * ||Phi||_F^2."""
    data = np.logaddexp(0.0, -triples.label * scores(latent, triples)).sum()
    return float(data + lambda_ * np.sum(latent.vectors ** 2))


# =============================================================================
# SGD training
# =============================================================================

@njit(cache=False)
def _project_row(vectors, row, b_max):
    norm_sq = 0.0
    for j in range(vectors.shape[1]):
        norm_sq += vectors[row, j] * vectors[row, j]
    if norm_sq > b_max * b_max:
        scale = b_max / np.sqrt(norm_sq)
        for j in range(vectors.shape[1]):
            vectors[row, j] *= scale


@njit(cache=False)
def _sgd_epoch(vectors, first, second, label, order, eta, lam, reg_scale, b_max):
    k = vectors.shape[1]
    for t in range(order.shape[0]):
        i = order[t]
        a = first[i]
        b = second[i]
        y = label[i]
        s = 0.0
        for j in range(k):
            s += vectors[a, j] * vectors[b, j]
        z = y * s
        # sigmoid(-z), stable for both signs
        if z >= 0.0:
            ez = np.exp(-z)
            sig = ez / (1.0 + ez)
        else:
            sig = 1.0 / (1.0 + np.exp(z))
        coef = -y * sig
        ra = 2.0 * lam * reg_scale[a]
        rb = 2.0 * lam * reg_scale[b]
        for j in range(k):
            va = vectors[a, j]
            vb = vectors[b, j]
            vectors[a, j] = va - eta * (coef * vb + ra * va)
            vectors[b, j] = vb - eta * (coef * va + rb * vb)
        _project_row(vectors, a, b_max)
        _project_row(vectors, b, b_max)


def init_latent(n_entities: int, hp: Hyperparams, seed: Union[int, np.random.Generator]) -> LatentMatrix:
    """I.i.d. Gaussian(0, init_var) coordinates. A Generator seed is drawn from in place."""
    rng = np.random.default_rng(seed)
    return LatentMatrix(rng.normal(0.0, np.sqrt(hp.init_var), size=(n_entities, hp.k)))


class _EpochRunner:
    """Compiled-kernel inputs for one triple set; runs epochs in place on `vectors`."""

    def __init__(self, triples: TripleArrays, n_entities: int, hp: Hyperparams):
        self.hp = hp
        self.first = np.ascontiguousarray(triples.first, dtype=np.int64)
        self.second = np.ascontiguousarray(triples.second, dtype=np.int64)
        self.label = np.ascontiguousarray(triples.label, dtype=np.float64)
        visits = np.bincount(self.first, minlength=n_entities) + np.bincount(self.second, minlength=n_entities)
        self.reg_scale = np.divide(1.0, visits, out=np.zeros(n_entities), where=visits > 0)

    def run(self, vectors: np.ndarray, rng: np.random.Generator, epoch: int) -> None:
        order = rng.permutation(self.label.shape[0])
        _sgd_epoch(vectors, self.first, self.second, self.label, order,
                   self.hp.eta, self.hp.lambda_, self.reg_scale, self.hp.b_max)
        if not np.all(np.isfinite(vectors)):
            raise NumericalError("SGD diverged", {"epoch": epoch, "eta": self.hp.eta})


def _mean_loss(vectors: np.ndarray, triples: TripleArrays) -> float:
    s = np.einsum("ij,ij->i", vectors[triples.first], vectors[triples.second])
    return float(np.logaddexp(0.0, -triples.label * s).mean())


def select_epochs(triples: TripleArrays, start: np.ndarray, hp: Hyperparams, seed: int) -> int:
    """
    Epoch count with the lowest held-out loss.

    A seed-determined `val_frac` share of the triples is held out; SGD runs on the rest
    from `start` until the held-out mean loss has not improved by more than `tol` for
    `patience` epochs. Returns hp.epochs when the set is too small to hold anything out.
    """
    n = len(triples)
    n_val = int(np.floor(hp.val_frac * n + 1e-9))
    if n_val == 0 or n_val == n:
        return hp.epochs

    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(n)
    held_out = triples.take(np.sort(perm[:n_val]))
    runner = _EpochRunner(triples.take(np.sort(perm[n_val:])), start.shape[0], hp)

    vectors = start.copy()
    best_loss, best_epoch = _mean_loss(vectors, held_out), 0
    for epoch in range(1, hp.epochs + 1):
        runner.run(vectors, rng, epoch)
        loss = _mean_loss(vectors, held_out)
        if loss < best_loss - hp.tol:
            best_loss, best_epoch = loss, epoch
        elif epoch - best_epoch >= hp.patience:
            break
    logger.debug(f"Held-out loss {best_loss:.6f} at epoch {best_epoch} ({n_val} of {n} triples held out)")
    return best_epoch


def sgd_train(triples: TripleArrays, n_entities: int, hp: Hyperparams, init_seed: int,
              init: Optional[LatentMatrix] = None,
              on_epoch: Optional[Callable[[int, float], None]] = None) -> LatentMatrix:
    """
    Fit the latent matrix by SGD over all triples.

    Each epoch visits every triple once in a seed-determined order and updates both
    endpoint vectors. The regularizer gradient of a vector is split evenly over its
    visits in the epoch, so an epoch applies one full lambda-gradient per vector.
    Vectors leaving the b_max ball are projected back.

    The number of epochs is picked on a held-out share of the triples (see
    select_epochs), then the model is trained on all triples from the same start for
    that many epochs, stopping earlier if the objective stalls.

    Args:
        triples: Training triples
        n_entities: Size of the entity registry
        hp: Hyperparameters
        init_seed: Seed for the initialization, the holdout and the visiting order
        init: Optional warm start (its shape must match)
        on_epoch: Called with (epoch, objective / N) after every epoch

    Returns:
        The trained, read-only LatentMatrix.
    """
    n = len(triples)
    if n == 0:
        raise DataError("Cannot train on an empty training set")

    rng = np.random.default_rng(init_seed)
    if init is None:
        vectors = init_latent(n_entities, hp, rng).vectors.copy()
    else:
        if init.vectors.shape != (n_entities, hp.k):
            raise DataError(f"Warm start has shape {init.vectors.shape}, expected {(n_entities, hp.k)}")
        vectors = init.vectors.copy()

    if hp.epochs == 0:
        return LatentMatrix(vectors)

    epochs = select_epochs(triples, vectors, hp, init_seed)
    runner = _EpochRunner(triples, n_entities, hp)
    current = previous = objective(LatentMatrix(vectors), triples, hp.lambda_) / n
    for epoch in range(epochs):
        runner.run(vectors, rng, epoch)
        current = objective(LatentMatrix(vectors), triples, hp.lambda_) / n
        if on_epoch is not None:
            on_epoch(epoch, current)
        if previous - current < hp.tol:
            logger.debug(f"Early stop after epoch {epoch + 1}: objective {current:.6f}")
            break
        previous = current

    trained = LatentMatrix(vectors)
    logger.debug(f"Trained on {n} triples for up to {epochs} epochs, objective/N {current:.6f}, "
                 f"|Phi|_F {trained.frobenius_norm():.4f}")
    return trained


# =============================================================================
# Per-user refit (Newton)
# =============================================================================

def _user_objective(phi: np.ndarray, E: np.ndarray, y: np.ndarray, lambda_: float) -> float:
    return float(np.logaddexp(0.0, -y * (E @ phi)).sum() + lambda_ * (phi @ phi))


def fit_user_vector(E: np.ndarray, y: np.ndarray, lambda_: float, init: np.ndarray,
                    context: Optional[Dict[str, Any]] = None) -> np.ndarray:
    """
    Damped Newton solve of argmin_phi sum_i nll(y_i, E_i, phi) + lambda * ||phi||^2.

    Rows of E may repeat (the same question answered several times).
    """
    context = context or {}
    k = E.shape[1]
    phi = np.array(init, dtype=np.float64, copy=True)

    f = _user_objective(phi, E, y, lambda_)
    grad_norm = np.inf
    for iteration in range(NEWTON_MAX_ITER):
        s = E @ phi
        grad = E.T @ (-y * expit(-y * s)) + 2.0 * lambda_ * phi
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= NEWTON_GRAD_TOL:
            return phi

        weights = expit(s) * expit(-s)
        hess = (E * weights[:, None]).T @ E + 2.0 * lambda_ * np.eye(k)
        try:
            direction = -cho_solve(cho_factor(hess), grad)
        except LinAlgError as e:
            raise NumericalError("Newton Hessian is not positive definite",
                                 {**context, "iteration": iteration}) from e

        step = 1.0
        slope = float(grad @ direction)
        slack = 1e-12 * max(1.0, abs(f))
        while True:
            candidate = phi + step * direction
            f_new = _user_objective(candidate, E, y, lambda_)
            if f_new <= f + ARMIJO_C * step * slope + slack or step < LINE_SEARCH_MIN_STEP:
                break
            step *= 0.5
        phi, f = candidate, f_new

    raise NumericalError(
        "Newton refit did not converge",
        {**context, "iterations": NEWTON_MAX_ITER, "grad_norm": grad_norm, "n_labeled": int(E.shape[0])},
    )


def refit_user(user: int, labeled: Mapping[int, int], phi_fixed: LatentMatrix, lambda_: float,
               init: Optional[np.ndarray] = None) -> np.ndarray:
    """
    argmin over phi_u of sum_{e in labeled} nll(y_e, phi_e, phi_u) + lambda * ||phi_u||^2.

    All entity vectors stay fixed; the problem is strictly convex in phi_u and is
    solved by damped Newton steps, warm-started from the user's current vector (or
    `init`). Returns a fresh vector; `phi_fixed` is not touched.
    """
    if not labeled:
        raise DataError(f"User {user} has no labeled entities to refit on")
    if lambda_ <= 0:
        raise DataError("lambda must be positive")

    entities = np.fromiter(labeled.keys(), dtype=np.int64, count=len(labeled))
    y = np.fromiter(labeled.values(), dtype=np.float64, count=len(labeled))
    start = phi_fixed.vectors[user] if init is None else init
    return fit_user_vector(phi_fixed.vectors[entities], y, lambda_, start, context={"user": user})


# =============================================================================
# Evaluation
# =============================================================================

def f1_score(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """F1 on the positive class; 0 when precision + recall is 0."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise DataError(f"Length mismatch: {pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise DataError("F1 needs at least one prediction")
    tp = float(np.sum((pred == 1) & (true == 1)))
    predicted_pos = float(np.sum(pred == 1))
    actual_pos = float(np.sum(true == 1))
    precision = tp / predicted_pos if predicted_pos else 0.0
    recall = tp / actual_pos if actual_pos else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def evaluate_f1(latent: LatentMatrix, triples: TripleArrays) -> float:
    return f1_score(predict_labels(latent, triples), triples.label.astype(np.int64))


# =============================================================================
# Latent TSV files (checkpoints and ground truth)
# =============================================================================

def write_latent_tsv(path: Union[str, Path], latent: LatentMatrix, store: RelationalStore,
                     header: Optional[Dict[str, Any]] = None) -> None:
    """entity_key<TAB>v1..vk at 17 significant digits, optional '# {json}' first line."""
    columns = ["entity_key"] + [f"v{j + 1}" for j in range(latent.k)]
    frame = pd.DataFrame(latent.vectors, columns=columns[1:])
    frame.insert(0, "entity_key", [store.qualified_key(e) for e in range(latent.n_entities)])
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header is not None:
            f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        frame.to_csv(f, sep="\t", index=False, float_format="%.17g", lineterminator="\n")


def read_latent_tsv(path: Union[str, Path], store: RelationalStore) -> Tuple[LatentMatrix, Dict[str, Any]]:
    """Inverse of write_latent_tsv; rows are re-ordered to the store's entity ids."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Latent file not found: {path}")
    with open(path, encoding="utf-8") as f:
        first_line = f.readline()
    header: Dict[str, Any] = {}
    skip = 0
    if first_line.startswith("#"):
        header = json.loads(first_line[1:])
        skip = 1
    frame = pd.read_csv(path, sep="\t", skiprows=skip, dtype={"entity_key": str},
                        float_precision="round_trip")

    vectors = np.full((store.n_entities, frame.shape[1] - 1), np.nan)
    for key, row in zip(frame["entity_key"], frame.iloc[:, 1:].to_numpy(dtype=np.float64)):
        entity = store.entity_from_qualified(key)
        if entity is None:
            raise DataError(f"{path}: entity '{key}' is not in the registry")
        vectors[entity] = row
    missing = np.flatnonzero(np.isnan(vectors).any(axis=1))
    if missing.size:
        raise DataError(f"{path}: no vector for {store.qualified_key(int(missing[0]))} "
                        f"and {missing.size - 1} other entities")
    return LatentMatrix(vectors), header


def save_checkpoint(path: Union[str, Path], latent: LatentMatrix, store: RelationalStore,
                    hp: Hyperparams, seed: int) -> None:
    header = {"k": hp.k, "lambda": hp.lambda_, "eta": hp.eta, "epochs": hp.epochs, "seed": seed}
    write_latent_tsv(path, latent, store, header=header)
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: Union[str, Path], store: RelationalStore) -> Tuple[LatentMatrix, Dict[str, Any]]:
    latent, header = read_latent_tsv(path, store)
    if header.get("k") not in (None, latent.k):
        raise DataError(f"{path}: header k={header['k']} but vectors have {latent.k} columns")
    return latent, header
