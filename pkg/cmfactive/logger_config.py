"""
Logging configuration for cmfactive.
Features: Colorized console, file output, run statistics tracking.
"""
import json
import logging
import os
import sys
from collections import defaultdict
from datetime import datetime
from typing import Dict, Optional

import colorlog


CONSOLE_FORMAT = "%(log_color)s%(asctime)s - %(name)s - %(message)s"

LEVEL_COLORS = {
    "DEBUG": "white",
    "INFO": "cyan",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "bold_red",
}


class ColorFormatter(colorlog.ColoredFormatter):
    """Custom formatter with colors for console output."""

    def __init__(self):
        super().__init__(CONSOLE_FORMAT, datefmt="%H:%M:%S", log_colors=LEVEL_COLORS)


class FileFormatter(logging.Formatter):
    """Plain text formatter for file output."""
    def __init__(self):
        super().__init__(
            fmt="%(asctime)s | %(name)-22s | %(levelname)-8s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging."""
    def format(self, record):
        log_entry = {
            "timestamp": datetime.now().isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if hasattr(record, "extra_data"):
            log_entry["data"] = record.extra_data
        return json.dumps(log_entry)


class RunStats:
    """Track run statistics across trials and selectors."""

    def __init__(self):
        self.start_time = datetime.now()
        self.trials = 0
        self.trainings = 0
        self.refits = 0
        self.selection_counts: Dict[str, int] = defaultdict(int)
        self.numerical_failures = 0
        self.events: list = []

    def record_trial(self):
        self.trials += 1

    def record_training(self):
        """Record a full SGD training run."""
        self.trainings += 1

    def record_refit(self, count: int = 1):
        self.refits += count

    def record_selection(self, selector: str, count: int = 1):
        self.selection_counts[selector] += count

    def record_numerical_failure(self):
        self.numerical_failures += 1

    def record_event(self, event_type: str, details: str):
        """Record a notable event."""
        self.events.append({
            "trial": self.trials,
            "type": event_type,
            "details": details
        })

    def merge(self, other: "RunStats") -> None:
        """Fold counters collected in a worker into this instance."""
        self.trials += other.trials
        self.trainings += other.trainings
        self.refits += other.refits
        self.numerical_failures += other.numerical_failures
        for selector, count in other.selection_counts.items():
            self.selection_counts[selector] += count
        self.events.extend(other.events)

    def get_summary(self) -> str:
        """Generate a summary report."""
        duration = datetime.now() - self.start_time

        lines = [
            "",
            "=" * 60,
            "                     RUN SUMMARY",
            "=" * 60,
            f"  Duration:           {duration.total_seconds():.1f} seconds",
            f"  MC Trials:          {self.trials}",
            f"  SGD Trainings:      {self.trainings}",
            f"  User Refits:        {self.refits}",
            f"  Numerical Failures: {self.numerical_failures}",
        ]

        if self.selection_counts:
            lines.append("")
            lines.append("  --- Questions Asked ---")
            for selector, count in sorted(self.selection_counts.items()):
                lines.append(f"    {selector:18s}: {count}")

        if self.events:
            lines.append("")
            lines.append("  --- Notable Events ---")
            for event in self.events[-10:]:
                lines.append(f"    [Trial {event['trial']}] {event['type']}: {event['details']}")

        lines.append("=" * 60)
        lines.append("")

        return "\n".join(lines)

    def export_json(self, filepath: str):
        """Export stats to JSON file."""
        data = {
            "start_time": self.start_time.isoformat(),
            "duration_seconds": (datetime.now() - self.start_time).total_seconds(),
            "trials": self.trials,
            "trainings": self.trainings,
            "refits": self.refits,
            "numerical_failures": self.numerical_failures,
            "selection_counts": dict(self.selection_counts),
            "events": self.events,
        }
        with open(filepath, "w") as f:
            json.dump(data, f, indent=2)


# Global stats instance
_stats: Optional[RunStats] = None


def get_stats() -> RunStats:
    """Get the global stats instance."""
    global _stats
    if _stats is None:
        _stats = RunStats()
    return _stats


def reset_stats():
    """Reset the global stats instance."""
    global _stats
    _stats = RunStats()


def setup_logging(log_dir: str = "logs", enable_file: bool = True, enable_json: bool = False,
                  level: int = logging.INFO):
    """
    Configure the logging system.

    Args:
        log_dir: Directory for log files
        enable_file: Whether to write logs to file
        enable_json: Whether to write structured JSON logs
        level: Root log level
    """
    # Suppress noisy libraries
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("joblib").setLevel(logging.WARNING)

    handlers = []

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(ColorFormatter())
    handlers.append(console_handler)

    if enable_file:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")

        file_handler = logging.FileHandler(
            os.path.join(log_dir, f"cmfactive_{timestamp}.log"),
            encoding="utf-8"
        )
        file_handler.setFormatter(FileFormatter())
        handlers.append(file_handler)

        if enable_json:
            json_handler = logging.FileHandler(
                os.path.join(log_dir, f"cmfactive_{timestamp}.jsonl"),
                encoding="utf-8"
            )
            json_handler.setFormatter(JSONFormatter())
            handlers.append(json_handler)

    logging.basicConfig(level=level, handlers=handlers, force=True)

    reset_stats()

    logger = logging.getLogger("CMFActive.Main")
    if enable_file:
        logger.info(f"Logs will be saved to: {log_dir}/")
