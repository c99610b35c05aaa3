from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import hashlib
import io
import logging

import numpy as np
import pandas as pd

from .errors import DataError
from .schemas import (
    EntityKind, Relation, RelationTriple, RELATION_CODES, RELATION_SCHEMA,
)

logger = logging.getLogger("CMFActive.Store")

TSV_COLUMNS = ["relation", "first_key", "second_key", "value"]


def read_tsv_frame(path: Path) -> pd.DataFrame:
    """Read a headed TSV as strings. Only lines starting with '#' are comments."""
    with path.open(encoding="utf-8") as handle:
        text = "".join(line for line in handle if not line.startswith("#"))
    return pd.read_csv(io.StringIO(text), sep="\t", dtype=str, keep_default_na=False)


# R rows carry stars; +1/-1 ratings are written as 5/1 stars.
STARS_FOR_LABEL = {1: 5, -1: 1}


@dataclass(frozen=True)
class TripleArrays:
    """Column view of a set of triples, ready for vectorized / compiled kernels."""
    relation: np.ndarray   # int8 relation codes
    first: np.ndarray      # int64 entity ids
    second: np.ndarray
    label: np.ndarray      # float64 in {+1, -1}

    def __len__(self) -> int:
        return int(self.label.shape[0])

    def take(self, idx: np.ndarray) -> "TripleArrays":
        return TripleArrays(relation=self.relation[idx], first=self.first[idx],
                            second=self.second[idx], label=self.label[idx])

    def concat(self, other: "TripleArrays") -> "TripleArrays":
        return TripleArrays(
            relation=np.concatenate([self.relation, other.relation]),
            first=np.concatenate([self.first, other.first]),
            second=np.concatenate([self.second, other.second]),
            label=np.concatenate([self.label, other.label]),
        )

    @staticmethod
    def empty() -> "TripleArrays":
        return TripleArrays(
            relation=np.zeros(0, dtype=np.int8),
            first=np.zeros(0, dtype=np.int64),
            second=np.zeros(0, dtype=np.int64),
            label=np.zeros(0, dtype=np.float64),
        )


class RelationalStore:
    """Entity registry plus the observed database of relation triples.

    Single writer while building; `freeze()` makes it read-only and safe to share.
    """

    def __init__(self) -> None:
        self._entities: List[Tuple[EntityKind, str]] = []
        self._entity_index: Dict[Tuple[EntityKind, str], int] = {}
        self._triples: List[RelationTriple] = []
        self._triple_index: Dict[Tuple[Relation, int, int], int] = {}
        self._arrays: Optional[TripleArrays] = None
        self._frozen = False

    # -------------------------------------------------------------------------
    # Entities
    # -------------------------------------------------------------------------

    def register_entity(self, kind: EntityKind, external_key: str) -> int:
        """Return the dense id for (kind, key), allocating the next id on first sight."""
        kind = EntityKind(kind)
        key = (kind, str(external_key))
        existing = self._entity_index.get(key)
        if existing is not None:
            return existing
        self._check_writable()
        entity_id = len(self._entities)
        self._entities.append(key)
        self._entity_index[key] = entity_id
        return entity_id

    def entity_id(self, kind: EntityKind, external_key: str) -> Optional[int]:
        return self._entity_index.get((EntityKind(kind), str(external_key)))

    def kind_of(self, entity_id: int) -> EntityKind:
        return self._entities[entity_id][0]

    def key_of(self, entity_id: int) -> str:
        return self._entities[entity_id][1]

    def qualified_key(self, entity_id: int) -> str:
        """'<kind>:<key>', unique across kinds."""
        kind, key = self._entities[entity_id]
        return f"{kind.value}:{key}"

    def entity_from_qualified(self, qualified: str) -> Optional[int]:
        kind, _, key = qualified.partition(":")
        try:
            return self.entity_id(EntityKind(kind), key)
        except ValueError:
            return None

    def entities_of_kind(self, kind: EntityKind) -> np.ndarray:
        kind = EntityKind(kind)
        return np.array([i for i, (k, _) in enumerate(self._entities) if k == kind], dtype=np.int64)

    @property
    def n_entities(self) -> int:
        return len(self._entities)

    # -------------------------------------------------------------------------
    # Triples
    # -------------------------------------------------------------------------

    def add_triple(self, relation: Relation, first: int, second: int, label: int) -> int:
        """Insert a triple; returns its index. Duplicates must agree on the label."""
        self._check_writable()
        relation = Relation(relation)
        first, second, label = int(first), int(second), int(label)
        first_kind, second_kind = RELATION_SCHEMA[relation]
        if not (0 <= first < self.n_entities and 0 <= second < self.n_entities):
            raise DataError(f"Unregistered entity in {relation.value} triple ({first}, {second})")
        if self.kind_of(first) != first_kind or self.kind_of(second) != second_kind:
            raise DataError(
                f"{relation.value} expects ({first_kind.value}, {second_kind.value}), got "
                f"({self.kind_of(first).value}, {self.kind_of(second).value})"
            )
        if label not in (1, -1):
            raise DataError(f"Label must be +1 or -1, got {label}")

        key = (relation, first, second)
        existing = self._triple_index.get(key)
        if existing is not None:
            if self._triples[existing].label != label:
                raise DataError(
                    f"Conflicting label for {relation.value} "
                    f"({self.qualified_key(first)}, {self.qualified_key(second)})"
                )
            return existing

        triple = RelationTriple(relation=relation, first=first, second=second, label=label)
        self._triples.append(triple)
        self._triple_index[key] = len(self._triples) - 1
        self._arrays = None
        return len(self._triples) - 1

    def add_relation(self, relation: Relation, first_key: str, second_key: str, label: int) -> int:
        """Register both endpoints by external key and insert the triple."""
        relation = Relation(relation)
        first_kind, second_kind = RELATION_SCHEMA[relation]
        first = self.register_entity(first_kind, first_key)
        second = self.register_entity(second_kind, second_key)
        return self.add_triple(relation, first, second, label)

    @property
    def triples(self) -> Sequence[RelationTriple]:
        return tuple(self._triples)

    @property
    def n_triples(self) -> int:
        """N, the number of observed triples."""
        return len(self._triples)

    def freeze(self) -> "RelationalStore":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_writable(self) -> None:
        if self._frozen:
            raise DataError("Store is frozen; no further writes are allowed")

    # -------------------------------------------------------------------------
    # Array views
    # -------------------------------------------------------------------------

    @property
    def arrays(self) -> TripleArrays:
        if self._arrays is None:
            n = len(self._triples)
            self._arrays = TripleArrays(
                relation=np.fromiter((RELATION_CODES[t.relation] for t in self._triples), dtype=np.int8, count=n),
                first=np.fromiter((t.first for t in self._triples), dtype=np.int64, count=n),
                second=np.fromiter((t.second for t in self._triples), dtype=np.int64, count=n),
                label=np.fromiter((t.label for t in self._triples), dtype=np.float64, count=n),
            )
        return self._arrays

    def select(self, indices: Iterable[int]) -> TripleArrays:
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        return self.arrays.take(idx)

    def indices_for(self, relations: Iterable[Relation]) -> np.ndarray:
        codes = [RELATION_CODES[Relation(r)] for r in relations]
        return np.flatnonzero(np.isin(self.arrays.relation, codes))

    def user_item(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(user, item) per triple: R is (business, user), UC is (user, category).

        BC triples have no user and yield -1 in both columns.
        """
        arrays = self.arrays
        rel = arrays.relation[indices]
        first = arrays.first[indices]
        second = arrays.second[indices]
        is_r = rel == RELATION_CODES[Relation.R]
        is_uc = rel == RELATION_CODES[Relation.UC]
        user = np.where(is_r, second, np.where(is_uc, first, -1))
        item = np.where(is_r, first, np.where(is_uc, second, -1))
        return user, item

    # -------------------------------------------------------------------------
    # File I/O
    # -------------------------------------------------------------------------

    @classmethod
    def from_tsv(cls, path: Union[str, Path], relations: Optional[Iterable[Relation]] = None) -> "RelationalStore":
        """Load a relations TSV (header required, '#' comment lines ignored)."""
        from .datasets import binarize_rating

        path = Path(path)
        if not path.is_file():
            raise DataError(f"Relations file not found: {path}")
        try:
            frame = read_tsv_frame(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataError(f"Cannot parse {path}: {e}") from e
        if list(frame.columns) != TSV_COLUMNS:
            raise DataError(f"{path}: expected header {TSV_COLUMNS}, got {list(frame.columns)}")

        wanted = {Relation(r) for r in relations} if relations is not None else None
        store = cls()
        for row in frame.itertuples(index=False):
            try:
                relation = Relation(row.relation)
                value = int(row.value)
            except ValueError as e:
                raise DataError(f"{path}: bad row {tuple(row)}: {e}") from e
            if wanted is not None and relation not in wanted:
                # keep the registry whole so ground-truth files still resolve
                first_kind, second_kind = RELATION_SCHEMA[relation]
                store.register_entity(first_kind, row.first_key)
                store.register_entity(second_kind, row.second_key)
                continue
            label = binarize_rating(value) if relation == Relation.R else value
            store.add_relation(relation, row.first_key, row.second_key, label)

        logger.info(f"Loaded {store.n_triples} triples over {store.n_entities} entities from {path}")
        return store.freeze()

    def to_tsv(self, path: Union[str, Path]) -> None:
        rows = []
        for t in self._triples:
            value = STARS_FOR_LABEL[t.label] if t.relation == Relation.R else t.label
            rows.append((t.relation.value, self.key_of(t.first), self.key_of(t.second), value))
        frame = pd.DataFrame(rows, columns=TSV_COLUMNS)
        frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
        logger.info(f"Wrote {len(rows)} triples to {path}")

    def fingerprint(self) -> str:
        """SHA-256 over entities and triples, independent of file formatting."""
        digest = hashlib.sha256()
        for kind, key in self._entities:
            digest.update(f"{kind.value}\t{key}\n".encode("utf-8"))
        for t in self._triples:
            digest.update(f"{t.relation.value}\t{t.first}\t{t.second}\t{t.label}\n".encode("utf-8"))
        return digest.hexdigest()
