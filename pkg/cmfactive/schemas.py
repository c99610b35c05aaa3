"""
cmfactive Schema Definitions

All Pydantic models shared across the package are centralized here:
- Relational models (EntityKind, Relation, RelationTriple)
- Model and dataset configuration (Hyperparams, SyntheticConfig)
- Selection and experiment models (SelectorKind, SelectionResult, ExperimentConfig)
- Output records (ResultRow, RunManifest)
"""
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


# =============================================================================
# Relational Models
# =============================================================================

class EntityKind(str, Enum):
    """Kind of an entity. Keys are scoped per kind."""
    USER = "user"
    BUSINESS = "business"
    CATEGORY = "category"


class Relation(str, Enum):
    """Binary relations of the Yelp schema."""
    R = "R"      # business x user ratings
    BC = "BC"    # business x category
    UC = "UC"    # user x category


# (first kind, second kind) per relation
RELATION_SCHEMA: Dict[Relation, Tuple[EntityKind, EntityKind]] = {
    Relation.R: (EntityKind.BUSINESS, EntityKind.USER),
    Relation.BC: (EntityKind.BUSINESS, EntityKind.CATEGORY),
    Relation.UC: (EntityKind.USER, EntityKind.CATEGORY),
}

# Integer codes used in the array views of the store.
RELATION_CODES: Dict[Relation, int] = {Relation.R: 0, Relation.BC: 1, Relation.UC: 2}


class RelationTriple(BaseModel):
    """One observed tuple {relation, first, second, label}."""
    model_config = ConfigDict(frozen=True)

    relation: Relation
    first: int = Field(ge=0, description="EntityId of the first endpoint")
    second: int = Field(ge=0, description="EntityId of the second endpoint")
    label: Literal[1, -1]

    @property
    def key(self) -> Tuple[Relation, int, int]:
        return (self.relation, self.first, self.second)


# =============================================================================
# Model / Dataset Configuration
# =============================================================================

class Hyperparams(BaseModel):
    """Training hyperparameters. `lambda_` is the prior precision on the summed loss."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lambda_: float = Field(0.1, gt=0, alias="lambda")
    eta: float = Field(0.02, gt=0)
    epochs: int = Field(200, ge=0)
    k: int = Field(10, gt=0)
    b_max: float = Field(10.0, gt=0)
    init_var: float = Field(0.01, ge=0)
    tol: float = Field(1e-6, ge=0, description="Early stop when per-epoch improvement drops below this")
    val_frac: float = Field(0.1, ge=0, lt=1, description="Share of triples held out to pick the epoch count")
    patience: int = Field(10, ge=1, description="Epochs without a held-out improvement before stopping")


class SyntheticConfig(BaseModel):
    """Sizes and latent distribution of the CMF-generated dataset."""
    model_config = ConfigDict(frozen=True)

    n_users: int = Field(100, gt=0)
    n_businesses: int = Field(100, gt=0)
    n_categories: int = Field(40, gt=0)
    k: int = Field(10, gt=0)
    mean: float = 0.25
    var: float = Field(0.1, ge=0, description="Variance of every latent coordinate")


# =============================================================================
# Selection Models
# =============================================================================

class SelectorKind(str, Enum):
    """Question selection strategies."""
    FISHER = "fisher"
    APPROX_A_INVERSE = "approx-a-inverse"
    APPROX_MAX_TRACE = "approx-max-trace"
    UNCERTAINTY = "uncertainty"
    MAX_MODEL_CHANGE = "max-model-change"
    MIN_MODEL_CHANGE = "min-model-change"
    RANDOM = "random"


class SelectionResult(BaseModel):
    """Questions chosen for one user, in selection order."""
    chosen: List[int]
    objective_value: float
    strategy: SelectorKind
    step_objectives: List[float] = Field(default_factory=list, description="Criterion after each greedy step")


# =============================================================================
# Experiment Models
# =============================================================================

class Protocol(str, Enum):
    PERSONALIZED = "personalized"
    COLD_START = "cold-start"
    NOISY = "noisy"


class OracleMode(str, Enum):
    PRETRAINED = "pretrained"
    NOISY_GROUND_TRUTH = "noisy-ground-truth"


class ExperimentConfig(BaseModel):
    """Everything one experiment protocol needs, resolved from a RunConfig."""
    model_config = ConfigDict(frozen=True)

    protocol: Protocol
    iterations: int = Field(ge=0)
    questions_per_round: int = Field(1, gt=0)
    user_fraction: float = Field(0.25, ge=0, le=1)
    mc_trials: int = Field(50, ge=1)
    master_seed: int = Field(0, ge=0)
    hyperparams: Hyperparams = Field(default_factory=Hyperparams)
    test_frac: float = Field(0.3, ge=0, le=1)
    train_frac: float = Field(0.1, ge=0, le=1)
    cold_frac: float = Field(0.4, gt=0, lt=1)
    relations: Tuple[Relation, ...] = (Relation.R, Relation.BC, Relation.UC)
    selectors: Tuple[SelectorKind, ...] = tuple(SelectorKind)
    full_retrain_every: int = Field(0, ge=0, description="0 keeps entity vectors frozen (refit users only)")
    n_jobs: int = 1
    record_selections: bool = False

    @model_validator(mode="after")
    def _check_fractions(self) -> "ExperimentConfig":
        if self.test_frac + self.train_frac > 1:
            raise ValueError("test_frac + train_frac must not exceed 1")
        if not self.selectors:
            raise ValueError("at least one selector is required")
        return self

    @property
    def oracle_mode(self) -> OracleMode:
        if self.protocol == Protocol.NOISY:
            return OracleMode.NOISY_GROUND_TRUTH
        return OracleMode.PRETRAINED


class ResultRow(BaseModel):
    """One (selector, iteration) aggregate of the F1 curve."""
    selector: SelectorKind
    iteration: int = Field(ge=0)
    f1_mean: float = Field(ge=0, le=1)
    f1_std: float = Field(ge=0)
    n_trials: int = Field(ge=1)


class RunManifest(BaseModel):
    """Provenance written next to every output."""
    command: str
    config_path: Optional[str] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    fingerprints: Dict[str, str] = Field(default_factory=dict)
    version: str
