from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Set, Tuple, Union
import logging

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import DataError
from .model import LatentMatrix, read_latent_tsv, write_latent_tsv
from .schemas import EntityKind, Relation, RelationTriple, SyntheticConfig
from .store import RelationalStore, read_tsv_frame

logger = logging.getLogger("CMFActive.Datasets")

RATINGS_COLUMNS = ["user_key", "business_key", "stars"]
CATEGORIES_COLUMNS = ["business_key", "category_key"]


def binarize_rating(stars: int) -> int:
    """4 and 5 stars are positive, 1..3 negative."""
    if isinstance(stars, bool) or int(stars) != stars or not 1 <= stars <= 5:
        raise DataError(f"Star rating must be an integer in 1..5, got {stars}")
    return 1 if stars >= 4 else -1


def build_user_categories(ratings: Iterable[RelationTriple], business_categories: Iterable[RelationTriple],
                          seed: int) -> List[RelationTriple]:
    """
    Derive the user x category relation.

    A user is positive on every category of every business they rated. For each user,
    as many negatives as positives are drawn uniformly without replacement from the
    categories that user never touched (fewer if not enough remain).
    """
    categories_of: Dict[int, Set[int]] = defaultdict(set)
    all_categories: Set[int] = set()
    for t in business_categories:
        if t.relation != Relation.BC:
            raise DataError(f"Expected BC triples, got {t.relation.value}")
        all_categories.add(t.second)
        if t.label == 1:
            categories_of[t.first].add(t.second)

    positives: Dict[int, Set[int]] = defaultdict(set)
    for t in ratings:
        if t.relation != Relation.R:
            raise DataError(f"Expected R triples, got {t.relation.value}")
        positives[t.second].update(categories_of.get(t.first, ()))

    universe = np.array(sorted(all_categories), dtype=np.int64)
    rng = np.random.default_rng(seed)
    result: List[RelationTriple] = []
    for user in sorted(positives):
        pos = positives[user]
        for category in sorted(pos):
            result.append(RelationTriple(relation=Relation.UC, first=user, second=category, label=1))
        unobserved = universe[~np.isin(universe, list(pos))]
        n_neg = min(len(pos), unobserved.size)
        if n_neg == 0:
            continue
        for category in np.sort(rng.choice(unobserved, size=n_neg, replace=False)):
            result.append(RelationTriple(relation=Relation.UC, first=user, second=int(category), label=-1))
    return result


# =============================================================================
# Yelp-schema ingestion
# =============================================================================

def _read_tsv(path: Union[str, Path], columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"File not found: {path}")
    try:
        frame = read_tsv_frame(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot parse {path}: {e}") from e
    if list(frame.columns) != columns:
        raise DataError(f"{path}: expected header {columns}, got {list(frame.columns)}")
    return frame


def ingest_yelp(ratings_path: Union[str, Path], categories_path: Union[str, Path], seed: int,
                min_user_ratings: int = 10, min_category_businesses: int = 5) -> RelationalStore:
    """
    Build a store from Yelp-schema TSVs: ratings (user_key, business_key, stars) and
    business categories (business_key, category_key). Categories tied to fewer than
    `min_category_businesses` businesses and users with fewer than `min_user_ratings`
    ratings are dropped before UC is synthesized.
    """
    ratings = _read_tsv(ratings_path, RATINGS_COLUMNS)
    categories = _read_tsv(categories_path, CATEGORIES_COLUMNS).drop_duplicates()
    try:
        ratings["stars"] = ratings["stars"].astype(int)
    except ValueError as e:
        raise DataError(f"{ratings_path}: non-integer stars: {e}") from e
    if ratings.duplicated(["user_key", "business_key"]).any():
        raise DataError(f"{ratings_path}: a user rated the same business twice")

    per_category = categories.groupby("category_key")["business_key"].nunique()
    kept_categories = per_category[per_category >= min_category_businesses].index
    categories = categories[categories["category_key"].isin(kept_categories)]

    per_user = ratings.groupby("user_key").size()
    kept_users = per_user[per_user >= min_user_ratings].index
    ratings = ratings[ratings["user_key"].isin(kept_users)]

    logger.info(f"Kept {len(kept_users)}/{len(per_user)} users and "
                f"{len(kept_categories)}/{len(per_category)} categories")

    store = RelationalStore()
    for row in ratings.itertuples(index=False):
        store.add_relation(Relation.R, row.business_key, row.user_key, binarize_rating(row.stars))
    for row in categories.itertuples(index=False):
        store.add_relation(Relation.BC, row.business_key, row.category_key, 1)

    r_triples = [t for t in store.triples if t.relation == Relation.R]
    bc_triples = [t for t in store.triples if t.relation == Relation.BC]
    for t in build_user_categories(r_triples, bc_triples, seed):
        store.add_triple(t.relation, t.first, t.second, t.label)

    logger.info(f"Ingested {store.n_triples} triples over {store.n_entities} entities")
    return store.freeze()


# =============================================================================
# Synthetic CMF data
# =============================================================================

def sample_labels(scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw +1 with probability sigmoid(score), else -1."""
    return np.where(rng.random(np.shape(scores)) < expit(scores), 1, -1)


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> Tuple[LatentMatrix, RelationalStore]:
    """
    Draw ground-truth factors and a fully observed R, BC, UC database from the CMF model.

    Entities are registered users first, then businesses, then categories; every
    latent coordinate is Gaussian(mean, var).
    """
    rng = np.random.default_rng(seed)
    store = RelationalStore()
    users = np.array([store.register_entity(EntityKind.USER, f"u{i}") for i in range(cfg.n_users)])
    businesses = np.array([store.register_entity(EntityKind.BUSINESS, f"b{i}") for i in range(cfg.n_businesses)])
    categories = np.array([store.register_entity(EntityKind.CATEGORY, f"c{i}") for i in range(cfg.n_categories)])

    truth = rng.normal(cfg.mean, np.sqrt(cfg.var), size=(store.n_entities, cfg.k))

    for relation, left, right in (
        (Relation.R, businesses, users),
        (Relation.BC, businesses, categories),
        (Relation.UC, users, categories),
    ):
        labels = sample_labels(truth[left] @ truth[right].T, rng)
        for i, a in enumerate(left):
            for j, b in enumerate(right):
                store.add_triple(relation, a, b, labels[i, j])

    logger.info(f"Generated {store.n_triples} triples over {store.n_entities} entities (k={cfg.k})")
    return LatentMatrix(truth), store.freeze()


def write_groundtruth(path: Union[str, Path], truth: LatentMatrix, store: RelationalStore) -> None:
    write_latent_tsv(path, truth, store)


def read_groundtruth(path: Union[str, Path], store: RelationalStore) -> LatentMatrix:
    truth, _ = read_latent_tsv(path, store)
    return truth
