import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .schemas import (
    ExperimentConfig, Hyperparams, Protocol, Relation, SelectorKind, SyntheticConfig,
)

load_dotenv()

# =============================================================================
# Environment
# =============================================================================

THREADS_ENV_VAR = "CMF_ACTIVE_THREADS"

# =============================================================================
# Model Defaults
# =============================================================================

DEFAULT_LAMBDA = 0.1
DEFAULT_ETA = 0.02
DEFAULT_K = 10               # 30 for Yelp data
DEFAULT_EPOCHS = 200
DEFAULT_B_MAX = 10.0
DEFAULT_INIT_VAR = 0.01
DEFAULT_TOL = 1e-6
DEFAULT_VAL_FRAC = 0.1
DEFAULT_PATIENCE = 10

# refit_user
NEWTON_MAX_ITER = 100
NEWTON_GRAD_TOL = 1e-8

# =============================================================================
# Experiment Defaults
# =============================================================================

PERSONALIZED_ITERATIONS = 25
COLD_START_ITERATIONS = 15
DEFAULT_MC_TRIALS = 50
TRIAL_SEED_STRIDE = 10007

# Sub-stream offsets derived from each trial seed
SEED_OFFSET_SPLIT = 1
SEED_OFFSET_INIT = 2
SEED_OFFSET_USERS = 3
SEED_OFFSET_ORACLE = 4
SEED_OFFSET_RANDOM = 5

# Yelp ingestion filters
MIN_USER_RATINGS = 10
MIN_CATEGORY_BUSINESSES = 5

# =============================================================================
# File Names
# =============================================================================

RELATIONS_FILE = "relations.tsv"
GROUNDTRUTH_FILE = "groundtruth.tsv"
RESULTS_FILE = "results.csv"
BOUNDS_FILE = "bounds.csv"
TRACE_FILE = "trace.csv"
SELECTION_TRACE_FILE = "selections.tsv"
MANIFEST_FILE = "manifest.json"
STATS_FILE = "stats.json"
EXCESS_LOSS_FILE = "excess_loss.csv"


class RunConfig(BaseModel):
    """Flat run configuration as read from a key=value file."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    master_seed: int = Field(0, ge=0)

    # synthetic generator
    n_users: int = Field(100, gt=0)
    n_businesses: int = Field(100, gt=0)
    n_categories: int = Field(40, gt=0)
    mean: float = 0.25
    var: float = Field(0.1, ge=0)

    # model
    k: int = Field(DEFAULT_K, gt=0)
    lambda_: float = Field(DEFAULT_LAMBDA, gt=0, alias="lambda")
    eta: float = Field(DEFAULT_ETA, gt=0)
    epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    b_max: float = Field(DEFAULT_B_MAX, gt=0)
    init_var: float = Field(DEFAULT_INIT_VAR, ge=0)
    tol: float = Field(DEFAULT_TOL, ge=0)
    val_frac: float = Field(DEFAULT_VAL_FRAC, ge=0, lt=1)
    patience: int = Field(DEFAULT_PATIENCE, ge=1)

    # experiment
    relations: Tuple[Relation, ...] = (Relation.R, Relation.BC, Relation.UC)
    iterations: Optional[int] = Field(None, ge=0)
    questions_per_round: int = Field(1, gt=0)
    user_fraction: float = Field(0.25, ge=0, le=1)
    mc_trials: int = Field(DEFAULT_MC_TRIALS, ge=1)
    test_frac: float = Field(0.3, ge=0, le=1)
    train_frac: float = Field(0.1, ge=0, le=1)
    cold_frac: float = Field(0.4, gt=0, lt=1)
    selectors: Tuple[SelectorKind, ...] = tuple(SelectorKind)
    full_retrain_every: int = Field(0, ge=0)
    threads: int = Field(1, ge=0)

    # Yelp ingestion
    min_user_ratings: int = Field(MIN_USER_RATINGS, ge=0)
    min_category_businesses: int = Field(MIN_CATEGORY_BUSINESSES, ge=0)

    # theorem check
    theorem_sizes: Tuple[int, ...] = (50, 100, 200)
    theorem_redraws: int = Field(200, gt=0)
    theorem_users: int = Field(3, gt=0)

    @field_validator("relations", "selectors", "theorem_sizes", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            lambda_=self.lambda_, eta=self.eta, epochs=self.epochs, k=self.k,
            b_max=self.b_max, init_var=self.init_var, tol=self.tol,
            val_frac=self.val_frac, patience=self.patience,
        )

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_users=self.n_users, n_businesses=self.n_businesses,
            n_categories=self.n_categories, k=self.k, mean=self.mean, var=self.var,
        )

    def experiment(self, protocol: Union[Protocol, str],
                   selectors: Optional[List[SelectorKind]] = None,
                   record_selections: bool = False) -> ExperimentConfig:
        """Resolve the settings one protocol runs with."""
        protocol = Protocol(protocol)
        iterations = self.iterations
        if iterations is None:
            iterations = COLD_START_ITERATIONS if protocol == Protocol.COLD_START else PERSONALIZED_ITERATIONS
        try:
            return ExperimentConfig(
                protocol=protocol,
                iterations=iterations,
                questions_per_round=self.questions_per_round,
                user_fraction=self.user_fraction,
                mc_trials=self.mc_trials,
                master_seed=self.master_seed,
                hyperparams=self.hyperparams(),
                test_frac=self.test_frac,
                train_frac=self.train_frac,
                cold_frac=self.cold_frac,
                relations=self.relations,
                selectors=tuple(selectors) if selectors else self.selectors,
                full_retrain_every=self.full_retrain_every,
                n_jobs=resolve_threads(self.threads),
                record_selections=record_selections,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid experiment settings: {e}") from e

    def resolved(self) -> Dict[str, object]:
        """Config values as plain JSON-ready data (for manifests)."""
        return self.model_dump(mode="json", by_alias=True)


def resolve_threads(threads: int) -> int:
    """Map the `threads` key (0 = auto) to a joblib n_jobs, honouring the env override."""
    override = os.getenv(THREADS_ENV_VAR)
    if override:
        try:
            threads = int(override)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got '{override}'") from e
    return -1 if threads == 0 else threads


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = value
    return values


def config_from_mapping(values: Dict[str, str]) -> RunConfig:
    known = {field.alias or name for name, field in RunConfig.model_fields.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e}") from e


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a RunConfig from a key=value file. None yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return config_from_mapping(parse_config_text(path.read_text(encoding="utf-8")))
