from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple
import logging
import math

import numpy as np

from .errors import DataError
from .schemas import Relation, RELATION_CODES
from .store import RelationalStore

logger = logging.getLogger("CMFActive.Splits")

# Minimum triples a user needs to take part in a personalized split
MIN_USER_TRIPLES = 3


@dataclass(frozen=True)
class Split:
    """Disjoint train / test / pool triple indices into one store."""
    train: np.ndarray
    test: np.ndarray
    pool: np.ndarray
    cold_users: Optional[FrozenSet[int]] = None
    excluded_users: Tuple[int, ...] = field(default_factory=tuple)


def _fraction_count(frac: float, n: int) -> int:
    # floor, tolerant of representation error (0.7 * 10 == 7.000000000000001)
    return int(math.floor(frac * n + 1e-9))


def _source(store: RelationalStore, relations: Optional[Iterable[Relation]]) -> np.ndarray:
    return store.indices_for(relations if relations is not None else list(Relation))


def _by_user(store: RelationalStore, indices: np.ndarray) -> Tuple[np.ndarray, dict]:
    """BC indices, and the user-bearing indices grouped per user (ascending)."""
    user, _ = store.user_item(indices)
    bc = indices[user < 0]
    groups = {}
    for u in np.unique(user[user >= 0]):
        groups[int(u)] = indices[user == u]
    return bc, groups


def split_personalized(store: RelationalStore, test_frac: float, train_frac: float, seed: int,
                       relations: Optional[Iterable[Relation]] = None) -> Split:
    """
    Per user, shuffle the user's R and UC triples and cut floor(test_frac * n) for
    test, floor(train_frac * n) for train; the rest forms the question pool. BC
    triples always go to train. Users with fewer than 3 triples are left out.
    """
    if test_frac < 0 or train_frac < 0 or test_frac + train_frac > 1:
        raise DataError(f"Invalid fractions test={test_frac} train={train_frac}")
    source = _source(store, relations)
    bc, groups = _by_user(store, source)

    rng = np.random.default_rng(seed)
    train, test, pool, excluded = [bc], [], [], []
    for user in sorted(groups):
        idx = groups[user]
        if idx.size < MIN_USER_TRIPLES:
            excluded.append(user)
            continue
        perm = rng.permutation(idx)
        n_test = _fraction_count(test_frac, idx.size)
        n_train = _fraction_count(train_frac, idx.size)
        test.append(perm[:n_test])
        train.append(perm[n_test:n_test + n_train])
        pool.append(perm[n_test + n_train:])

    if excluded:
        logger.warning(f"Excluded {len(excluded)} users with fewer than {MIN_USER_TRIPLES} triples: "
                       f"{[store.key_of(u) for u in excluded[:10]]}")

    return Split(
        train=np.sort(np.concatenate(train)).astype(np.int64),
        test=np.sort(np.concatenate(test or [np.zeros(0, np.int64)])).astype(np.int64),
        pool=np.sort(np.concatenate(pool or [np.zeros(0, np.int64)])).astype(np.int64),
        excluded_users=tuple(excluded),
    )


def split_cold_start(store: RelationalStore, cold_frac: float, seed: int,
                     relations: Optional[Iterable[Relation]] = None) -> Split:
    """
    Pick floor(cold_frac * n_users) cold users uniformly. Their triples are halved
    into test and pool (odd remainders go to the pool); every other triple trains.
    """
    if not 0 < cold_frac < 1:
        raise DataError(f"cold_frac must lie in (0, 1), got {cold_frac}")
    source = _source(store, relations)
    bc, groups = _by_user(store, source)

    rng = np.random.default_rng(seed)
    users = np.array(sorted(groups), dtype=np.int64)
    n_cold = _fraction_count(cold_frac, users.size)
    cold = set(int(u) for u in rng.choice(users, size=n_cold, replace=False))

    train, test, pool = [bc], [], []
    for user in users:
        idx = groups[int(user)]
        if int(user) not in cold:
            train.append(idx)
            continue
        perm = rng.permutation(idx)
        n_test = idx.size // 2
        test.append(perm[:n_test])
        pool.append(perm[n_test:])

    logger.info(f"Cold start: {n_cold} of {users.size} users held out")
    return Split(
        train=np.sort(np.concatenate(train)).astype(np.int64),
        test=np.sort(np.concatenate(test or [np.zeros(0, np.int64)])).astype(np.int64),
        pool=np.sort(np.concatenate(pool or [np.zeros(0, np.int64)])).astype(np.int64),
        cold_users=frozenset(cold),
    )


def relation_mask(store: RelationalStore, indices: np.ndarray, relation: Relation) -> np.ndarray:
    """Boolean mask of `indices` that belong to `relation`."""
    return store.arrays.relation[indices] == RELATION_CODES[relation]
