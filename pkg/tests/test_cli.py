import json
import os

import numpy as np
import pandas as pd
import pytest

from utils.aggregation import load_checkpoint
from utils.cli import EXIT_OK, EXIT_USAGE, main
from utils.codec import BinaryMask, FilterSpec, encode_dense, encode_update
from utils.config import ENV_OUTPUT_DIR, ENV_WORKERS
from utils.export_handler import ExportHandler

TINY = ["clients=4", "rounds=3", "dim=8", "samples=400", "test_samples=100", "hidden=[8]", "batch_size=32"]


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)
    monkeypatch.delenv(ENV_WORKERS, raising=False)


class TestRun:

    def test_writes_results(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "-o", str(out), "--xlsx", "--plot", *TINY]) == EXIT_OK
        metrics = pd.read_csv(out / "metrics.csv")
        assert list(metrics["t"]) == [1, 2, 3]
        assert metrics["cum_bytes"].is_monotonic_increasing
        clients = pd.read_csv(out / "clients.csv")
        assert len(clients) == 3 * 4
        assert (out / "metrics.xlsx").exists()
        assert (out / "accuracy.html").exists() and (out / "bitrate.html").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["rounds"] == 3
        assert summary["total_bytes"] == int(metrics["cum_bytes"].iloc[-1])
        assert load_checkpoint((out / "checkpoint.dmg").read_bytes()).round == 3
        assert (out / "resolved_config.toml").exists()
        assert "final accuracy" in capsys.readouterr().out

    def test_override_rounds(self, tmp_path):
        out = tmp_path / "run"
        assert main(["run", "-o", str(out), *TINY, "rounds=5"]) == EXIT_OK
        assert len(pd.read_csv(out / "metrics.csv")) == 5

    def test_misspelled_key(self, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("[federation]\nrouds = 5\n")
        assert main(["run", "-c", str(config), "-o", str(tmp_path / "run")]) == EXIT_USAGE
        assert not (tmp_path / "run" / "metrics.csv").exists()

    def test_dry_run(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "--dry-run", "-o", str(out), "rounds=7"]) == EXIT_OK
        assert "rounds = 7" in capsys.readouterr().out
        assert not out.exists()

    def test_check_bound_columns(self, tmp_path):
        out = tmp_path / "run"
        assert main(["run", "-o", str(out), "--check-bound", *TINY, "bound_trials=20"]) == EXIT_OK
        metrics = pd.read_csv(out / "metrics.csv")
        np.testing.assert_allclose(metrics["bound"], 64 / 16)

    def test_resume(self, tmp_path):
        first = tmp_path / "first"
        assert main(["run", "-o", str(first), *TINY, "rounds=2"]) == EXIT_OK
        second = tmp_path / "second"
        assert main(["run", "-o", str(second), "--resume", str(first / "checkpoint.dmg"), *TINY]) == EXIT_OK
        assert list(pd.read_csv(second / "metrics.csv")["t"]) == [3]

    def test_missing_checkpoint(self, tmp_path):
        assert main(["run", "-o", str(tmp_path), "--resume", str(tmp_path / "none.dmg"), *TINY]) == EXIT_USAGE

    def test_saved_updates_match_accounting(self, tmp_path):
        out = tmp_path / "run"
        assert main(["run", "-o", str(out), "--save-updates", *TINY]) == EXIT_OK
        files = sorted((out / "updates").iterdir())
        assert len(files) == 4
        assert all(f.name.startswith("round0003_client") for f in files)
        metrics = pd.read_csv(out / "metrics.csv")
        assert sum(f.stat().st_size for f in files) == int(metrics["round_bytes"].iloc[-1])

    def test_same_seed_gives_identical_csv(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["run", "-o", str(first), *TINY, "workers=1"]) == EXIT_OK
        assert main(["run", "-o", str(second), *TINY, "workers=4"]) == EXIT_OK
        for name in ("metrics.csv", "clients.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_unknown_command(self):
        assert main(["serve"]) == EXIT_USAGE


class TestBenchFilter:

    def test_table(self, tmp_path, capsys):
        args = ["bench-filter", "-n", "2000", "--bpe", "8", "16", "--layout", "both",
                "-r", "1", "--probes", "20000", "--csv", "-o", str(tmp_path)]
        assert main(args) == EXIT_OK
        df = pd.read_csv(tmp_path / "bench_filter.csv")
        assert len(df) == 4
        assert (df["false_negatives"] == 0).all()
        assert "bits_per_key" in capsys.readouterr().out

    def test_zero_repetitions(self, tmp_path):
        assert main(["bench-filter", "-r", "0", "-o", str(tmp_path)]) == EXIT_USAGE

    def test_unsupported_width(self, tmp_path):
        assert main(["bench-filter", "--bpe", "12", "-o", str(tmp_path)]) == EXIT_USAGE


class TestVerifyBound:

    def test_pass(self, tmp_path, capsys):
        assert main(["verify-bound", "-d", "200", "-k", "5", "-t", "500", "-o", str(tmp_path)]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_constant_theta(self, tmp_path, capsys):
        assert main(["verify-bound", "-d", "40", "-k", "1", "-t", "50", "--theta", "0.5",
                     "-o", str(tmp_path)]) == EXIT_OK
        assert "bound d/4K 10.0000" in capsys.readouterr().out

    def test_bad_arguments(self, tmp_path):
        assert main(["verify-bound", "-t", "0", "-o", str(tmp_path)]) == EXIT_USAGE
        assert main(["verify-bound", "--theta", "1.5", "-o", str(tmp_path)]) == EXIT_USAGE


class TestExportPng:

    def _update_file(self, tmp_path, keys):
        update = encode_update(np.arange(0, 3 * keys, 3), d=3 * keys, spec=FilterSpec(8), seed=2)
        path = tmp_path / "client.dmu"
        path.write_bytes(update.to_bytes())
        return path, update

    def test_round_trip(self, tmp_path, capsys):
        path, update = self._update_file(tmp_path, 500)
        assert main(["export-png", str(path), "-o", str(tmp_path)]) == EXIT_OK
        png = tmp_path / "client.png"
        assert png.exists()
        assert len(ExportHandler.import_png(str(png))) == update.params.payload_bytes
        assert "fingerprint bytes" in capsys.readouterr().out

    def test_corrupt_update(self, tmp_path):
        path = tmp_path / "broken.dmu"
        path.write_bytes(b"DMU1" + b"\x00" * 10)
        assert main(["export-png", str(path), "-o", str(tmp_path)]) == EXIT_USAGE

    def test_dense_update_has_no_fingerprints(self, tmp_path):
        path = tmp_path / "dense.dmu"
        path.write_bytes(encode_dense(BinaryMask.ones(64)).to_bytes())
        assert main(["export-png", str(path), "-o", str(tmp_path)]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert main(["export-png", str(tmp_path / "absent.dmu"), "-o", str(tmp_path)]) == EXIT_USAGE


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "-o", str(out), *TINY]) == EXIT_OK
    train = pd.read_csv(out / "train.csv")
    shards = pd.read_csv(out / "shards.csv")
    assert len(train) == 300 and len(pd.read_csv(out / "test.csv")) == 100
    assert len(shards) == 300
    assert set(shards["client"]) == {0, 1, 2, 3}
    assert list(train.columns) == [f"x{i}" for i in range(8)] + ["label"]
    assert os.path.exists(out / "deltamask.log")
