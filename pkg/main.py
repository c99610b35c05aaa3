import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from cmfactive import __version__
from cmfactive.config import (
    BOUNDS_FILE, EXCESS_LOSS_FILE, GROUNDTRUTH_FILE, MANIFEST_FILE, RELATIONS_FILE, RESULTS_FILE,
    SELECTION_TRACE_FILE, STATS_FILE, TRACE_FILE, RunConfig, load_config,
)
from cmfactive.datasets import generate_synthetic, ingest_yelp, read_groundtruth, write_groundtruth
from cmfactive.errors import CMFError, ConfigError, DataError
from cmfactive.experiment import run_experiment, run_theorem_check
from cmfactive.logger_config import get_stats, setup_logging
from cmfactive.model import load_checkpoint, save_checkpoint, sgd_train
from cmfactive.results import (
    fingerprints, read_results, write_bounds, write_excess_loss, write_manifest, write_report,
    write_results, write_selection_trace, write_trace,
)
from cmfactive.schemas import Protocol, RunManifest, SelectorKind
from cmfactive.store import RelationalStore

logger = logging.getLogger("CMFActive.Main")

CHECKPOINT_FILE = "checkpoint.tsv"
REPORT_FILE = "report.tsv"


def _manifest(args: argparse.Namespace, cfg: RunConfig, inputs: Dict[str, Optional[Path]]) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_path=str(args.config) if args.config else None,
        config=cfg.resolved(),
        seeds={"master_seed": cfg.master_seed},
        fingerprints=fingerprints(inputs),
        version=__version__,
    )


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_selectors(text: Optional[str]) -> Optional[List[SelectorKind]]:
    if not text:
        return None
    try:
        return [SelectorKind(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--selectors: {e}") from e


# =============================================================================
# Subcommands
# =============================================================================

def cmd_generate(args: argparse.Namespace) -> None:
    """Write a synthetic CMF dataset and its ground-truth factors."""
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    truth, store = generate_synthetic(cfg.synthetic(), cfg.master_seed)
    store.to_tsv(out / RELATIONS_FILE)
    write_groundtruth(out / GROUNDTRUTH_FILE, truth, store)
    write_manifest(out / MANIFEST_FILE, _manifest(args, cfg, {"config": args.config}))


def cmd_ingest(args: argparse.Namespace) -> None:
    """Turn Yelp-schema ratings and business categories into a relations file."""
    cfg = load_config(args.config)
    out = _out_dir(args.out)
    store = ingest_yelp(args.ratings, args.categories, cfg.master_seed,
                        min_user_ratings=cfg.min_user_ratings,
                        min_category_businesses=cfg.min_category_businesses)
    store.to_tsv(out / RELATIONS_FILE)
    inputs = {"config": args.config, "ratings": Path(args.ratings), "categories": Path(args.categories)}
    write_manifest(out / MANIFEST_FILE, _manifest(args, cfg, inputs))


def cmd_train(args: argparse.Namespace) -> None:
    """Fit the CMF model on the whole dataset and write a checkpoint."""
    cfg = load_config(args.config)
    data = Path(args.data)
    out = _out_dir(args.out)
    store = RelationalStore.from_tsv(data / RELATIONS_FILE, cfg.relations)
    hp = cfg.hyperparams()
    init = None
    if args.init:
        init, _ = load_checkpoint(args.init, store)
    arrays = store.select(store.indices_for(cfg.relations))
    latent = sgd_train(arrays, store.n_entities, hp, cfg.master_seed, init=init)
    get_stats().record_training()
    save_checkpoint(out / CHECKPOINT_FILE, latent, store, hp, cfg.master_seed)
    inputs = {"config": args.config, "relations": data / RELATIONS_FILE,
              "init": Path(args.init) if args.init else None}
    write_manifest(out / MANIFEST_FILE, _manifest(args, cfg, inputs))


def cmd_experiment(args: argparse.Namespace) -> None:
    """Run one active-learning protocol and write its F1 curves."""
    cfg = load_config(args.config)
    data = Path(args.data)
    out = _out_dir(args.out)
    protocol = Protocol(args.protocol)

    store = RelationalStore.from_tsv(data / RELATIONS_FILE)
    groundtruth = data / GROUNDTRUTH_FILE
    truth = read_groundtruth(groundtruth, store) if groundtruth.is_file() else None

    exp_cfg = cfg.experiment(protocol, selectors=_parse_selectors(args.selectors),
                             record_selections=args.selection_trace)
    result = run_experiment(exp_cfg, store, truth)

    write_results(out / RESULTS_FILE, result.table)
    write_bounds(out / BOUNDS_FILE, result.lower, result.upper)
    if args.trace:
        write_trace(out / TRACE_FILE, result.trace)
    if args.selection_trace:
        write_selection_trace(out / SELECTION_TRACE_FILE, result.selections)
    inputs = {"config": args.config, "relations": data / RELATIONS_FILE,
              "groundtruth": groundtruth if truth is not None else None}
    write_manifest(out / MANIFEST_FILE, _manifest(args, cfg, inputs))
    get_stats().export_json(str(out / STATS_FILE))


def cmd_check(args: argparse.Namespace) -> None:
    """Compare measured excess loss of refit user vectors with the predicted 1/M rate."""
    cfg = load_config(args.config)
    data = Path(args.data)
    out = _out_dir(args.out)
    store = RelationalStore.from_tsv(data / RELATIONS_FILE)
    groundtruth = data / GROUNDTRUTH_FILE
    if not groundtruth.is_file():
        raise DataError(f"Excess-loss check needs ground-truth factors, {groundtruth} not found")
    truth = read_groundtruth(groundtruth, store)

    frame = run_theorem_check(store, truth, cfg.theorem_sizes, cfg.lambda_, cfg.theorem_redraws,
                              cfg.theorem_users, cfg.master_seed)
    write_excess_loss(out / EXCESS_LOSS_FILE, frame)
    inputs = {"config": args.config, "relations": data / RELATIONS_FILE, "groundtruth": groundtruth}
    write_manifest(out / MANIFEST_FILE, _manifest(args, cfg, inputs))


def cmd_report(args: argparse.Namespace) -> None:
    """Render results.csv as a long-format TSV."""
    cfg = load_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = read_results(args.results)
    write_report(out, table)
    # sits beside the report so a run directory keeps its own manifest
    write_manifest(out.with_name(f"{out.stem}_{MANIFEST_FILE}"),
                   _manifest(args, cfg, {"config": args.config, "results": args.results}))


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "report": cmd_report,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="cmfactive - active learning for collective matrix factorization")
    parser.add_argument("--no-log-file", action="store_true", help="Disable file logging")
    parser.add_argument("--log-dir", default="logs", help="Directory for log files (default: logs)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug-level console output")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Generate the synthetic dataset")
    gen.add_argument("--config", "-c", help="key=value config file")
    gen.add_argument("--out", "-o", default="data/synthetic", help="Output directory")

    ing = sub.add_parser("ingest", help="Ingest Yelp-schema TSVs")
    ing.add_argument("--ratings", required=True, help="TSV with user_key, business_key, stars")
    ing.add_argument("--categories", required=True, help="TSV with business_key, category_key")
    ing.add_argument("--config", "-c", help="key=value config file")
    ing.add_argument("--out", "-o", default="data/yelp", help="Output directory")

    train = sub.add_parser("train", help="Train a CMF checkpoint")
    train.add_argument("--data", "-d", required=True, help=f"Directory holding {RELATIONS_FILE}")
    train.add_argument("--config", "-c", help="key=value config file")
    train.add_argument("--init", help="Warm-start checkpoint")
    train.add_argument("--out", "-o", required=True, help="Output directory")

    exp = sub.add_parser("experiment", help="Run an active-learning protocol")
    exp.add_argument("protocol", choices=[p.value for p in Protocol])
    exp.add_argument("--data", "-d", required=True, help=f"Directory holding {RELATIONS_FILE}")
    exp.add_argument("--config", "-c", help="key=value config file")
    exp.add_argument("--out", "-o", required=True, help="Output directory")
    exp.add_argument("--selectors", help="Comma-separated subset of selectors")
    exp.add_argument("--trace", action="store_true", help=f"Also write per-trial F1 ({TRACE_FILE})")
    exp.add_argument("--selection-trace", action="store_true",
                     help=f"Also write every selection step ({SELECTION_TRACE_FILE})")

    rep = sub.add_parser("report", help="Long-format TSV from a results file")
    rep.add_argument("--results", "-r", required=True, help=f"Path to {RESULTS_FILE}")
    rep.add_argument("--config", "-c", help="key=value config file recorded in the manifest")
    rep.add_argument("--out", "-o", default=REPORT_FILE, help="Output TSV")

    chk = sub.add_parser("check", help="Excess-loss vs predicted rate on synthetic data")
    chk.add_argument("--data", "-d", required=True, help=f"Directory holding {RELATIONS_FILE} and {GROUNDTRUTH_FILE}")
    chk.add_argument("--config", "-c", help="key=value config file")
    chk.add_argument("--out", "-o", required=True, help="Output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(log_dir=args.log_dir, enable_file=not args.no_log_file,
                  level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        COMMANDS[args.command](args)
    except CMFError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code

    summary = get_stats().get_summary()
    for line in summary.split("\n"):
        logger.info(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
