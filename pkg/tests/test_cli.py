"""End-to-end checks of the staged command-line pipeline."""

import json
import subprocess
import sys

import pytest

from dialrx import cli
from dialrx.cfx import read_effects_csv

# Small population and model so the full seven-stage pipeline stays fast.
# min_support=15 drops the sparse creatinine stratum instead of bootstrapping it.
CONFIG = {
    "gen": {"n_patients": 800, "prevalence": 0.06},
    "model": {"n_layers": 1, "hidden_dim": 32, "n_heads": 2, "max_len": 48},
    "train": {"epochs": 1, "vocab_min_count": 2},
    "ate": {"folds": 2},
    "labs": {"bootstrap": 100, "min_support": 15},
}


def run_pipeline(root, seed=7):
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    base = ["--seed", str(seed), "--config", str(cfg)]
    dirs = {name: str(root / name) for name in ("gen", "cohort", "model", "eval", "ate", "labs", "report")}
    assert cli.main(["gen", "--out", dirs["gen"], *base]) == 0
    assert cli.main(["cohort", "--out", dirs["cohort"], *base, "--gen-dir", dirs["gen"]]) == 0
    assert cli.main(["train", "--out", dirs["model"], *base, "--cohort-dir", dirs["cohort"]]) == 0
    assert (
        cli.main(["eval", "--out", dirs["eval"], *base, "--model-dir", dirs["model"], "--cohort-dir", dirs["cohort"]])
        == 0
    )
    assert (
        cli.main(
            [
                "ate",
                "--out",
                dirs["ate"],
                *base,
                "--model-dir",
                dirs["model"],
                "--cohort-dir",
                dirs["cohort"],
                "--catalog",
                dirs["gen"] + "/catalog.csv",
                "--ingredients",
                "lisinopril,furosemide",
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "labs",
                "--out",
                dirs["labs"],
                *base,
                "--gen-dir",
                dirs["gen"],
                "--cohort-dir",
                dirs["cohort"],
                "--ingredients",
                "furosemide",
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "report",
                "--out",
                dirs["report"],
                *base,
                "--cohort-dir",
                dirs["cohort"],
                "--metrics",
                dirs["eval"] + "/metrics.json",
                "--effects",
                dirs["ate"] + "/effects.csv",
                "--validation",
                dirs["labs"] + "/validation.csv",
            ]
        )
        == 0
    )
    return dirs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class TestArtifacts:
    def test_every_stage_writes_its_files(self, pipeline):
        expected = {
            "gen": ["events.csv", "labs.csv", "catalog.csv", "truth.json", "gen_meta.json"],
            "cohort": ["rows_train.jsonl", "rows_val.jsonl", "rows_test.jsonl", "cohort_meta.json"],
            "model": ["checkpoint.json", "vocab.json", "epoch_log.csv"],
            "eval": ["metrics.json", "pr_curve.csv", "calibration.csv"],
            "ate": ["effects.csv"],
            "labs": ["validation.csv"],
            "report": ["report.json"],
        }
        import os

        for stage, names in expected.items():
            for name in names:
                assert os.path.exists(os.path.join(pipeline[stage], name)), f"{stage}/{name}"

    def test_metrics_panel_structure(self, pipeline):
        payload = read_json(pipeline["eval"] + "/metrics.json")
        assert payload["obs_days"] == 90
        assert len(payload["config_hash"]) == 16
        for model_name in ("transformer", "logistic"):
            panel = payload[model_name]
            for key in ("auc", "pr_auc", "precision", "recall", "f1", "brier", "threshold"):
                assert 0.0 <= panel[key] <= 1.0

    def test_csv_outputs_carry_provenance_comment(self, pipeline):
        for path in (
            pipeline["gen"] + "/events.csv",
            pipeline["ate"] + "/effects.csv",
            pipeline["labs"] + "/validation.csv",
        ):
            with open(path, encoding="utf-8") as fh:
                first = fh.readline()
            assert first.startswith("# config_hash=")
            assert "seed=7" in first

    def test_truth_records_planted_effects(self, pipeline):
        truth = read_json(pipeline["gen"] + "/truth.json")
        assert set(truth["ate"]) >= {"lisinopril", "furosemide"}
        assert truth["seed"] == 7


class TestReport:
    def test_table1_covers_cohort_characteristics(self, pipeline):
        report = read_json(pipeline["report"] + "/report.json")
        meta = read_json(pipeline["cohort"] + "/cohort_meta.json")
        table1 = report["table1"]
        assert table1["columns"] == ["characteristic", "value"]
        rows = dict((r[0], r[1]) for r in table1["rows"])
        assert rows["N patients"] == str(meta["n"])
        assert rows["Observation window"] == "90 days"
        assert set(rows) >= {"eGFR available", "creatinine available", "BUN available", "Outcome prevalence"}

    def test_table2_matches_metrics_json(self, pipeline):
        report = read_json(pipeline["report"] + "/report.json")
        metrics = read_json(pipeline["eval"] + "/metrics.json")
        table2 = report["table2"]
        assert table2["columns"] == ["metric", "transformer_90d", "logistic_90d"]
        assert [r[0] for r in table2["rows"]] == ["auc", "pr_auc", "precision", "recall", "f1", "threshold"]
        for row in table2["rows"]:
            assert row[1] == metrics["transformer"][row[0]]
            assert row[2] == metrics["logistic"][row[0]]

    def test_table4_preserves_effect_rows_and_joins_verdicts(self, pipeline):
        report = read_json(pipeline["report"] + "/report.json")
        effects = read_effects_csv(pipeline["ate"] + "/effects.csv")
        table4 = report["table4"]
        assert table4["columns"] == ["ingredient", "ate", "direction", "support", "consistency"]
        assert len(table4["rows"]) == len(effects) == 2
        consistency = {r[0]: r[4] for r in table4["rows"]}
        # Only furosemide went through the lab validation stage.
        assert consistency["lisinopril"] == "unvalidated"
        assert consistency["furosemide"] != "unvalidated"

    def test_validation_rows_are_count_preserving(self, pipeline):
        report = read_json(pipeline["report"] + "/report.json")
        with open(pipeline["labs"] + "/validation.csv", encoding="utf-8") as fh:
            data_lines = [l for l in fh if l.strip() and not l.startswith("#")]
        assert len(report["validation"]["rows"]) == len(data_lines) - 1  # header


class TestDeterminism:
    def test_rerun_with_same_seed_is_byte_identical(self, pipeline, tmp_path):
        again = run_pipeline(tmp_path, seed=7)
        for stage, name in (("eval", "metrics.json"), ("ate", "effects.csv"), ("labs", "validation.csv")):
            with open(pipeline[stage] + "/" + name, "rb") as fh:
                first = fh.read()
            with open(again[stage] + "/" + name, "rb") as fh:
                second = fh.read()
            assert first == second, f"{stage}/{name} differs between identical runs"


class TestConfigResolution:
    def test_env_seed_applies_when_flag_absent(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DIALRX_SEED", "9")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_patients": 50, "prevalence": 0.1}}))
        assert cli.main(["gen", "--out", str(tmp_path / "g"), "--config", str(cfg)]) == 0
        assert read_json(str(tmp_path / "g" / "gen_meta.json"))["seed"] == 9

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DIALRX_SEED", "9")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_patients": 50, "prevalence": 0.1}}))
        assert cli.main(["gen", "--out", str(tmp_path / "g"), "--seed", "3", "--config", str(cfg)]) == 0
        assert read_json(str(tmp_path / "g" / "gen_meta.json"))["seed"] == 3

    def test_toml_config_section_applies(self, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text("[gen]\nn_patients = 60\nprevalence = 0.1\n")
        assert cli.main(["gen", "--out", str(tmp_path / "g"), "--seed", "1", "--config", str(cfg)]) == 0
        assert read_json(str(tmp_path / "g" / "gen_meta.json"))["config"]["n_patients"] == 60

    def test_obs_days_flag_flows_into_cohort_window(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_patients": 80, "prevalence": 0.1}}))
        base = ["--seed", "1", "--config", str(cfg), "--obs-days", "365", "--pred-days", "365"]
        assert cli.main(["gen", "--out", str(tmp_path / "g"), *base]) == 0
        assert cli.main(["cohort", "--out", str(tmp_path / "c"), *base, "--gen-dir", str(tmp_path / "g")]) == 0
        meta = read_json(str(tmp_path / "c" / "cohort_meta.json"))
        assert meta["obs_days"] == 365
        rows = dict((r[0], r[1]) for r in meta["table1"]["rows"])
        assert rows["Observation window"] == "365 days"


class TestErrorPaths:
    def test_invalid_gen_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_patients": 0}}))
        code = cli.main(["gen", "--out", str(tmp_path / "g"), "--seed", "1", "--config", str(cfg)])
        assert code == 2
        assert "error: InvalidConfig" in capsys.readouterr().err

    def test_missing_gen_dir_exits_2(self, tmp_path, capsys):
        code = cli.main(["cohort", "--out", str(tmp_path / "c"), "--seed", "1", "--gen-dir", str(tmp_path / "nope")])
        assert code == 2
        assert "error: MissingInput" in capsys.readouterr().err

    def test_bad_env_obs_days_exits_2(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DIALRX_OBS_DAYS", "100")
        code = cli.main(["gen", "--out", str(tmp_path / "g"), "--seed", "1"])
        assert code == 2
        assert "error: InvalidConfig" in capsys.readouterr().err

    def test_bad_obs_days_flag_is_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["gen", "--out", str(tmp_path / "g"), "--obs-days", "100"])

    def test_missing_out_dir_exits_2(self, capsys, monkeypatch):
        monkeypatch.delenv("DIALRX_OUT", raising=False)
        assert cli.main(["gen", "--seed", "1"]) == 2
        assert "error: InvalidConfig" in capsys.readouterr().err


class TestEntryPoint:
    def test_module_invocation_runs_gen(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_patients": 50, "prevalence": 0.1}}))
        proc = subprocess.run(
            [sys.executable, "-m", "dialrx.cli", "gen", "--out", str(tmp_path / "g"), "--seed", "1", "--config", str(cfg)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "g" / "truth.json").exists()
