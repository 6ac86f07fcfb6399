import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from fedstock import __version__, cli
from fedstock import experiment as ex

ALL_REGIMES = sorted(ex.REGIMES)


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def write_config(path: Path, **training) -> Path:
    cfg = ex.load_config("smoke").to_dict()
    cfg["training"].update(training)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """Smoke config through synth, every regime and evaluate."""
    out = tmp_path_factory.mktemp("smoke")
    start = time.perf_counter()
    codes = [run("synth", "--config", "smoke", "--out", out)]
    codes += [run("train", "--config", "smoke", "--out", out, "--regime", r, "--threads", 2) for r in ALL_REGIMES]
    codes.append(run("evaluate", "--config", "smoke", "--out", out))
    return out, codes, time.perf_counter() - start


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPipeline:
    def test_smoke_exits_cleanly_and_quickly(self, smoke_run):
        _, codes, elapsed = smoke_run
        assert codes == [0] * len(codes)
        assert elapsed < 60

    def test_manifest_accounts_for_every_animal(self, smoke_run):
        out, _, _ = smoke_run
        manifest = json.loads((out / "data" / "manifest.json").read_text())
        assert sum(f["n_animals"] for f in manifest["farms"]) == manifest["total_animals"] == 40
        assert manifest["tool_version"] == __version__

    def test_same_seed_gives_identical_manifest(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        assert run("synth", "--config", "smoke", "--out", tmp_path) == 0
        for f in sorted((out / "data").iterdir()):
            assert (tmp_path / "data" / f.name).read_bytes() == f.read_bytes()

    def test_pfl_writes_body_and_one_head_per_farm(self, smoke_run):
        out, _, _ = smoke_run
        files = sorted(p.name for p in (out / "models" / "pfl").glob("*.ckpt"))
        assert files == ["body.ckpt", "head_000.ckpt", "head_001.ckpt"]
        meta = json.loads((out / "models" / "pfl" / "manifest.json").read_text())
        assert set(meta["files"]["heads"]) == {"A", "B"}

    def test_sqrt_flag_maps_to_sqrt_policy(self):
        assert ex.REGIMES["fl-sqrt"][1].value == "sqrt"
        assert ex.REGIMES["pfl-sqrt"][1].value == "sqrt"

    def test_summary_lists_exactly_trained_regimes(self, smoke_run):
        out, _, _ = smoke_run
        summary = json.loads((out / "reports" / "summary.json").read_text())
        assert sorted(summary["regimes"]) == ALL_REGIMES
        assert summary["config_hash"] == ex.load_config("smoke").config_hash

    def test_report_has_every_horizon(self, smoke_run):
        out, _, _ = smoke_run
        rows = read_csv(out / "reports" / "report.csv")
        assert list(rows[0]) == list(ex.REPORT_COLUMNS)
        for regime in ALL_REGIMES:
            horizons = {r["horizon"] for r in rows if r["regime"] == regime and r["stratum"] == "all"}
            assert horizons == {"all", "1", "2", "3"}

    def test_evaluate_subset(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        import shutil
        copy = tmp_path / "run"
        shutil.copytree(out, copy)
        assert run("evaluate", "--config", "smoke", "--out", copy, "--regime", "fl", "--regime", "local") == 0
        summary = json.loads((copy / "reports" / "summary.json").read_text())
        assert sorted(summary["regimes"]) == ["fl", "local"]

    def test_thread_count_does_not_change_reports(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        assert run("synth", "--config", "smoke", "--out", tmp_path) == 0
        for r in ALL_REGIMES:
            assert run("train", "--config", "smoke", "--out", tmp_path, "--regime", r, "--threads", 1) == 0
        assert run("evaluate", "--config", "smoke", "--out", tmp_path) == 0
        for name in ("report.csv", "summary.json"):
            assert (tmp_path / "reports" / name).read_bytes() == (out / "reports" / name).read_bytes()


class TestCompare:
    def test_self_comparison_has_zero_deltas(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        assert run("compare", out / "reports", out, "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "comparison.csv")
        assert rows and all(float(r["delta_rmse_kg"]) == 0.0 and float(r["delta_mae_kg"]) == 0.0 for r in rows)

    def test_rows_sorted_by_regime_then_stratum(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        run("compare", out, out, "--out", tmp_path)
        rows = read_csv(tmp_path / "comparison.csv")
        regimes = [r["regime"] for r in rows]
        assert regimes == sorted(regimes)
        for regime in set(regimes):
            strata = [r["stratum"] for r in rows if r["regime"] == regime]
            assert strata[0] == "all"
            assert strata == sorted(strata, key=lambda s: s != "all")

    def test_small_farm_series_covers_farms_under_50(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        run("compare", out, out, "--out", tmp_path)
        series = read_csv(tmp_path / "small_farm_series.csv")
        assert {r["farm_id"] for r in series} == {"A", "B"}
        assert {"local", "pfl"} <= {r["regime"] for r in series}

    def test_horizon_mismatch_exit_6(self, smoke_run, tmp_path):
        out, _, _ = smoke_run
        summary = json.loads((out / "reports" / "summary.json").read_text())
        summary["horizon"] = 5
        other = tmp_path / "summary.json"
        other.write_text(json.dumps(summary))
        assert run("compare", out, other, "--out", tmp_path / "cmp") == 6

    def test_needs_two_reports(self, smoke_run):
        out, _, _ = smoke_run
        assert run("compare", out) == 2


class TestExitCodes:
    def test_invalid_config_reports_field_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", learning_rate=-1.0)
        assert run("synth", "--config", cfg, "--out", tmp_path) == 2
        assert "training.learning_rate" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = ex.load_config("smoke").to_dict()
        cfg["data"]["windw_len"] = 3
        path = tmp_path / "typo.json"
        path.write_text(json.dumps(cfg))
        assert run("synth", "--config", path, "--out", tmp_path) == 2
        assert "windw_len" in capsys.readouterr().err

    def test_bad_arguments(self, tmp_path):
        assert run("train", "--config", "smoke", "--out", tmp_path, "--regime", "nope") == 2
        assert run("synth", "--config", "smoke", "--threads", 0) == 2

    def test_missing_dataset_exit_3(self, tmp_path):
        assert run("train", "--config", "smoke", "--out", tmp_path, "--regime", "fl") == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_4_names_client(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "div.json", optimizer="sgd", learning_rate=1e6)
        assert run("synth", "--config", cfg, "--out", tmp_path) == 0
        assert run("train", "--config", cfg, "--out", tmp_path, "--regime", "fl") == 4
        assert "client A" in capsys.readouterr().err

    def test_dataset_hash_mismatch_exit_5(self, tmp_path):
        assert run("synth", "--config", "smoke", "--out", tmp_path) == 0
        assert run("train", "--config", "smoke", "--out", tmp_path, "--regime", "fl", "--seed", 7) == 5

    def test_checkpoint_hash_mismatch_exit_5(self, tmp_path):
        assert run("synth", "--config", "smoke", "--out", tmp_path) == 0
        assert run("train", "--config", "smoke", "--out", tmp_path, "--regime", "fl") == 0
        other = write_config(tmp_path / "other.json", rounds=3)
        assert run("evaluate", "--config", other, "--out", tmp_path) == 5


class TestConfig:
    @pytest.mark.parametrize("name", ex.bundled_config_names())
    def test_bundled_configs_round_trip(self, name):
        cfg = ex.load_config(name)
        again = ex.ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg and again.to_json() == cfg.to_json()
        assert again.config_hash == cfg.config_hash

    def test_bundled_table3_mix_is_current(self):
        from importlib import resources
        text = resources.files("fedstock").joinpath("configs/table3-mix.json").read_text()
        assert ex.ExperimentConfig.from_json(text).config_hash == ex.ExperimentConfig().config_hash

    def test_output_dir_not_part_of_hash(self):
        a = ex.ExperimentConfig()
        b = ex.ExperimentConfig.from_dict({**a.to_dict(), "output_dir": "elsewhere"})
        assert a.config_hash == b.config_hash
        assert ex.ExperimentConfig.from_dict({**a.to_dict(), "seed": 1}).config_hash != a.config_hash


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fedstock.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
