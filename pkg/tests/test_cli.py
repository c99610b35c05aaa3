"""Tests for configuration parsing and the command-line entry point."""
import json

import numpy as np
import pandas as pd
import pytest

from cmfactive.config import (
    THREADS_ENV_VAR, config_from_mapping, load_config, parse_config_text, resolve_threads,
)
from cmfactive.errors import ConfigError
from cmfactive.model import load_checkpoint
from cmfactive.schemas import Protocol, Relation, SelectorKind
from cmfactive.store import RelationalStore
from main import main

SMALL_CONFIG = """\
# tiny synthetic run
master_seed = 1
n_users = 10
n_businesses = 12
n_categories = 5
k = 3
epochs = 20
iterations = 2
mc_trials = 2
threads = 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def generated(tmp_path, config_file):
    out = tmp_path / "synthetic"
    assert main(["--no-log-file", "generate", "--config", str(config_file), "--out", str(out)]) == 0
    return out


class TestConfig:
    """Test the flat key=value configuration."""

    def test_parse_with_comments(self):
        values = parse_config_text("a = 1  # trailing\n\n# whole line\nb=two\n")
        assert values == {"a": "1", "b": "two"}

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("k = 3\nk = 4\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("just words\n")

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError, match="bogus, lamda"):
            config_from_mapping({"lamda": "0.1", "bogus": "1"})

    def test_lists_and_alias(self):
        cfg = config_from_mapping({"lambda": "0.5", "relations": "R, UC", "selectors": "fisher,random"})
        assert cfg.lambda_ == 0.5
        assert cfg.relations == (Relation.R, Relation.UC)
        assert cfg.selectors == (SelectorKind.FISHER, SelectorKind.RANDOM)
        assert cfg.hyperparams().lambda_ == 0.5

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"n_users": "0"})

    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.k == 10
        assert cfg.experiment(Protocol.PERSONALIZED).iterations == 25
        assert cfg.experiment(Protocol.COLD_START).iterations == 15

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_threads_env_override(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV_VAR, "3")
        assert resolve_threads(1) == 3
        monkeypatch.delenv(THREADS_ENV_VAR)
        assert resolve_threads(0) == -1

    def test_bundled_configs_load(self, data_dir):
        """Test that every example config in data/ is valid."""
        for path in sorted(data_dir.glob("*.cfg")):
            load_config(path)


class TestGenerateAndTrain:
    """Test dataset generation and checkpoint training commands."""

    def test_generate_outputs(self, generated):
        assert (generated / "relations.tsv").is_file()
        assert (generated / "groundtruth.tsv").is_file()
        manifest = json.loads((generated / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["seeds"] == {"master_seed": 1}
        assert "config" in manifest["fingerprints"]

    def test_generate_is_byte_identical(self, generated, tmp_path, config_file):
        again = tmp_path / "again"
        main(["--no-log-file", "generate", "--config", str(config_file), "--out", str(again)])
        for name in ("relations.tsv", "groundtruth.tsv"):
            assert (generated / name).read_bytes() == (again / name).read_bytes()

    def test_generate_rejects_empty_population(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("n_users = 0\n")
        assert main(["--no-log-file", "generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_unknown_key_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("colour = blue\n")
        assert main(["--no-log-file", "generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_train_and_zero_epoch_retrain(self, generated, tmp_path, config_file):
        """Test the checkpoint header and that a 0-epoch warm start changes nothing."""
        first = tmp_path / "model"
        assert main(["--no-log-file", "train", "--data", str(generated), "--config", str(config_file),
                     "--out", str(first)]) == 0
        store = RelationalStore.from_tsv(generated / "relations.tsv")
        latent, header = load_checkpoint(first / "checkpoint.tsv", store)
        assert header["k"] == 3
        assert header["lambda"] == 0.1

        frozen_cfg = tmp_path / "frozen.cfg"
        frozen_cfg.write_text(SMALL_CONFIG.replace("epochs = 20", "epochs = 0"))
        second = tmp_path / "model2"
        assert main(["--no-log-file", "train", "--data", str(generated), "--config", str(frozen_cfg),
                     "--init", str(first / "checkpoint.tsv"), "--out", str(second)]) == 0
        retrained, _ = load_checkpoint(second / "checkpoint.tsv", store)
        np.testing.assert_array_equal(retrained.vectors, latent.vectors)

    def test_train_missing_data(self, tmp_path, config_file):
        code = main(["--no-log-file", "train", "--data", str(tmp_path / "none"), "--config", str(config_file),
                     "--out", str(tmp_path / "m")])
        assert code == 3


class TestExperimentCommand:
    """Test the experiment and report commands."""

    def test_personalized_outputs(self, generated, tmp_path, config_file):
        out = tmp_path / "run"
        code = main(["--no-log-file", "experiment", "personalized", "--data", str(generated),
                     "--config", str(config_file), "--out", str(out), "--trace", "--selection-trace"])
        assert code == 0
        results = pd.read_csv(out / "results.csv")
        assert list(results.columns) == ["selector", "iteration", "f1_mean", "f1_std", "n_trials"]
        assert len(results) == len(SelectorKind) * 3
        bounds = pd.read_csv(out / "bounds.csv")
        assert bounds["bound"].tolist() == ["lower", "upper"]
        assert (out / "trace.csv").is_file()
        assert (out / "selections.tsv").is_file()
        assert (out / "manifest.json").is_file()
        stats = json.loads((out / "stats.json").read_text())
        assert stats["trials"] == 2

    def test_selector_filter(self, generated, tmp_path, config_file):
        out = tmp_path / "run"
        main(["--no-log-file", "experiment", "personalized", "--data", str(generated),
              "--config", str(config_file), "--out", str(out), "--selectors", "fisher,random"])
        results = pd.read_csv(out / "results.csv")
        assert sorted(results["selector"].unique()) == ["fisher", "random"]

    def test_results_reproducible(self, generated, tmp_path, config_file):
        for name in ("a", "b"):
            main(["--no-log-file", "experiment", "cold-start", "--data", str(generated),
                  "--config", str(config_file), "--out", str(tmp_path / name), "--selectors", "fisher"])
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    def test_bad_selector_name(self, generated, tmp_path, config_file):
        code = main(["--no-log-file", "experiment", "personalized", "--data", str(generated),
                     "--config", str(config_file), "--out", str(tmp_path / "r"), "--selectors", "psychic"])
        assert code == 2

    def test_noisy_needs_ground_truth(self, data_dir, tmp_path):
        """Test that the noisy protocol refuses ingested (non-synthetic) data."""
        fixture = data_dir / "yelp_fixture"
        yelp = tmp_path / "yelp"
        assert main(["--no-log-file", "ingest", "--ratings", str(fixture / "ratings.tsv"),
                     "--categories", str(fixture / "business_categories.tsv"), "--out", str(yelp)]) == 0
        code = main(["--no-log-file", "experiment", "noisy", "--data", str(yelp), "--out", str(tmp_path / "n")])
        assert code == 3

    def test_report_long_format(self, generated, tmp_path, config_file):
        out = tmp_path / "run"
        main(["--no-log-file", "experiment", "personalized", "--data", str(generated),
              "--config", str(config_file), "--out", str(out), "--selectors", "uncertainty"])
        report = tmp_path / "report.tsv"
        assert main(["--no-log-file", "report", "--results", str(out / "results.csv"), "--out", str(report)]) == 0
        frame = pd.read_csv(report, sep="\t")
        assert list(frame.columns) == ["selector", "iteration", "statistic", "value"]
        assert len(frame) == 3 * 3
        assert set(frame["statistic"]) == {"f1_mean", "f1_std", "n_trials"}

    def test_report_writes_manifest(self, generated, tmp_path, config_file):
        """Test that the report gets its own manifest and leaves the run manifest alone."""
        out = tmp_path / "run"
        main(["--no-log-file", "experiment", "personalized", "--data", str(generated),
              "--config", str(config_file), "--out", str(out), "--selectors", "random"])
        run_manifest = (out / "manifest.json").read_bytes()
        assert main(["--no-log-file", "report", "--results", str(out / "results.csv"),
                     "--config", str(config_file), "--out", str(out / "report.tsv")]) == 0
        manifest = json.loads((out / "report_manifest.json").read_text())
        assert manifest["command"] == "report"
        assert set(manifest["fingerprints"]) == {"config", "results"}
        assert (out / "manifest.json").read_bytes() == run_manifest

    def test_excess_loss_check(self, generated, tmp_path):
        cfg = tmp_path / "check.cfg"
        cfg.write_text(SMALL_CONFIG + "theorem_sizes = 5,10\ntheorem_redraws = 5\ntheorem_users = 2\n")
        out = tmp_path / "check"
        assert main(["--no-log-file", "check", "--data", str(generated), "--config", str(cfg),
                     "--out", str(out)]) == 0
        frame = pd.read_csv(out / "excess_loss.csv")
        assert list(frame.columns) == ["user", "M", "excess_loss", "predicted", "ratio"]
        assert frame["M"].tolist() == [5, 5, 10, 10]
        assert (frame["predicted"] > 0).all()

    def test_excess_loss_check_needs_truth(self, tmp_path, generated):
        (generated / "groundtruth.tsv").unlink()
        code = main(["--no-log-file", "check", "--data", str(generated), "--out", str(tmp_path / "c")])
        assert code == 3
