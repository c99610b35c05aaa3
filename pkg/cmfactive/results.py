"""
Result files: F1 curve tables, bounds, raw traces, the report long format and run
manifests. All CSV/TSV writing goes through pandas with a fixed float format so
equal inputs give byte-identical files.
"""
from pathlib import Path
from typing import Dict, Iterable, List, Union
import hashlib
import json
import logging

import numpy as np
import pandas as pd

from .errors import DataError
from .schemas import ResultRow, RunManifest, SelectorKind

logger = logging.getLogger("CMFActive.Results")

RESULT_COLUMNS = ["selector", "iteration", "f1_mean", "f1_std", "n_trials"]
BOUNDS_COLUMNS = ["bound", "f1"]
TRACE_COLUMNS = ["trial", "selector", "iteration", "f1"]
SELECTION_COLUMNS = ["trial", "selector", "iteration", "user", "step", "entity", "objective"]
REPORT_COLUMNS = ["selector", "iteration", "statistic", "value"]
EXCESS_LOSS_COLUMNS = ["user", "M", "excess_loss", "predicted", "ratio"]

FLOAT_FORMAT = "%.17g"


class ResultTable:
    """One row per (selector, iteration): mean and std of F1 over Monte Carlo trials."""

    def __init__(self, rows: Iterable[ResultRow]):
        self.rows: List[ResultRow] = sorted(rows, key=lambda r: (list(SelectorKind).index(r.selector), r.iteration))
        seen = set()
        for row in self.rows:
            key = (row.selector, row.iteration)
            if key in seen:
                raise DataError(f"Duplicate result row for {row.selector.value} iteration {row.iteration}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def selectors(self) -> List[SelectorKind]:
        return list(dict.fromkeys(r.selector for r in self.rows))

    def curve(self, selector: SelectorKind) -> np.ndarray:
        """Mean F1 per iteration for one selector."""
        selector = SelectorKind(selector)
        return np.array([r.f1_mean for r in self.rows if r.selector == selector])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump(mode="json") for r in self.rows], columns=RESULT_COLUMNS)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ResultTable":
        if list(frame.columns) != RESULT_COLUMNS:
            raise DataError(f"Expected columns {RESULT_COLUMNS}, got {list(frame.columns)}")
        return cls(ResultRow(**record) for record in frame.to_dict(orient="records"))


# =============================================================================
# Writers / readers
# =============================================================================

def _write_frame(path: Union[str, Path], frame: pd.DataFrame, sep: str = ",") -> None:
    frame.to_csv(path, sep=sep, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")


def write_results(path: Union[str, Path], table: ResultTable) -> None:
    _write_frame(path, table.to_frame())


def read_results(path: Union[str, Path]) -> ResultTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Results file not found: {path}")
    return ResultTable.from_frame(pd.read_csv(path, float_precision="round_trip"))


def write_bounds(path: Union[str, Path], lower: float, upper: float) -> None:
    _write_frame(path, pd.DataFrame({"bound": ["lower", "upper"], "f1": [lower, upper]}, columns=BOUNDS_COLUMNS))


def write_trace(path: Union[str, Path], trace: pd.DataFrame) -> None:
    """Raw per-trial F1 (`trial,selector,iteration,f1`)."""
    _write_frame(path, trace[TRACE_COLUMNS])


def write_selection_trace(path: Union[str, Path], selections: pd.DataFrame) -> None:
    """Per-step picks of every selector, tab separated."""
    _write_frame(path, selections[SELECTION_COLUMNS], sep="\t")


def report_long_format(table: ResultTable) -> pd.DataFrame:
    """Melt a result table into plot-ready `selector iteration statistic value` rows."""
    frame = table.to_frame()
    long = frame.melt(id_vars=["selector", "iteration"], value_vars=["f1_mean", "f1_std", "n_trials"],
                      var_name="statistic", value_name="value")
    order = {s.value: i for i, s in enumerate(SelectorKind)}
    long["_rank"] = long["selector"].map(order)
    long = long.sort_values(["_rank", "iteration", "statistic"], kind="stable").drop(columns="_rank")
    return long[REPORT_COLUMNS].reset_index(drop=True)


def write_report(path: Union[str, Path], table: ResultTable) -> None:
    _write_frame(path, report_long_format(table), sep="\t")


# =============================================================================
# Manifests
# =============================================================================

def file_fingerprint(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: Union[str, Path], manifest: RunManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Manifest written to {path}")


def fingerprints(paths: Dict[str, Union[str, Path]]) -> Dict[str, str]:
    """SHA-256 per named input file; missing optional files are skipped."""
    return {name: file_fingerprint(p) for name, p in paths.items() if p is not None and Path(p).is_file()}


def write_excess_loss(path: Union[str, Path], frame: pd.DataFrame) -> None:
    _write_frame(path, frame[EXCESS_LOSS_COLUMNS])
