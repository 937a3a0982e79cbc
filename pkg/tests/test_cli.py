import json

import pytest

from decompopf.cli import COMMANDS, HELP, build_parser, main
from pipeline import artifact_hashes, run_pipeline


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = run_pipeline(root)
    return root, codes


def test_pipeline_exit_codes(pipeline_run):
    root, codes = pipeline_run
    assert codes == [0] * len(codes)
    for name in ("reports/D.json", "reports/O.csv", "reports/D.md", "reports/comparison.md",
                 "models/stage2/region_1/params.bin", "predictions/D_test.ndjson"):
        assert (root / name).is_file(), name


def test_rerun_is_byte_identical(pipeline_run, tmp_path):
    root, _ = pipeline_run
    assert run_pipeline(tmp_path / "again") == [0] * 11
    assert artifact_hashes(tmp_path / "again") == artifact_hashes(root)


def test_seed_changes_artifacts(pipeline_run, tmp_path):
    root, _ = pipeline_run
    run_pipeline(tmp_path / "other", seed=8)
    a, b = artifact_hashes(root), artifact_hashes(tmp_path / "other")
    assert a["dataset/samples.ndjson"] != b["dataset/samples.ndjson"]


def test_run_json_echo(pipeline_run):
    root, _ = pipeline_run
    doc = json.loads((root / "run.json").read_text())
    assert doc["gen-data"]["T"] == 20 and doc["gen-data"]["seed"] == 7
    assert doc["train-stage1"]["epochs_lambda"] == 2


def test_config_file_with_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "case": "toy6", "K": 3}))
    assert main(["partition", "--run-dir", str(tmp_path), "--config", str(cfg), "--K", "2"]) == 0
    assert json.loads((tmp_path / "run.json").read_text())["partition"]["K"] == 2


def test_missing_seed(tmp_path, capsys):
    assert main(["partition", "--run-dir", str(tmp_path), "--case", "toy6", "--K", "2"]) == 2
    assert "seed" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "colour": "red"}))
    assert main(["partition", "--run-dir", str(tmp_path), "--config", str(cfg)]) == 2


def test_missing_case_file(tmp_path):
    assert main(["partition", "--run-dir", str(tmp_path), "--seed", "1", "--case", "nope.m", "--K", "2"]) == 2


def test_missing_dataset(tmp_path):
    assert main(["train-direct", "--run-dir", str(tmp_path), "--seed", "1"]) == 2


def test_bad_flag_value_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["train-direct", "--run-dir", str(tmp_path), "--seed", "1", "--norm", "l3"])
    assert err.value.code == 2


def test_mismatched_prediction_case(pipeline_run, tmp_path):
    root, _ = pipeline_run
    common = ["--run-dir", str(tmp_path), "--seed", "7"]
    assert main(["gen-data", *common, "--case", "case9", "--T", "5"]) == 0
    (tmp_path / "predictions").mkdir()
    (tmp_path / "predictions" / "D_test.ndjson").write_bytes((root / "predictions" / "D_test.ndjson").read_bytes())
    assert main(["evaluate", *common]) == 2


def test_compare_rejects_other_dataset(pipeline_run, tmp_path):
    root, _ = pipeline_run
    rep = json.loads((root / "reports" / "O.json").read_text())
    rep["dataset_digest"] = "0000:test"
    (tmp_path / "O.json").write_text(json.dumps(rep))
    code = main(["evaluate", "--run-dir", str(root), "--seed", "7", "--model", "D",
                 "--reports", str(tmp_path / "r"), "--compare", str(tmp_path / "O.json")])
    assert code == 2


def test_infeasible_case_is_solver_failure(tmp_path, capsys):
    case = {"base_mva": 100, "buses": [{"id": 1, "v_min": 0.95, "v_max": 1.05, "is_ref": True},
                                       {"id": 2, "v_min": 0.95, "v_max": 1.05}],
            "branches": [{"from_bus": 1, "to_bus": 2, "g": 1.0, "b": -10.0}],
            "generators": [{"bus": 1, "p_min": 0, "p_max": 0.2, "q_min": -1, "q_max": 1}],
            "loads": [{"bus": 2, "p_nom": 1.0, "q_nom": 0.1}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(case))
    code = main(["gen-data", "--run-dir", str(tmp_path), "--seed", "1", "--case", str(path), "--T", "5",
                 "--max-iter", "30"])
    assert code == 3
    assert "solver failure" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_aborts(pipeline_run, tmp_path):
    root, _ = pipeline_run
    code = main(["train-direct", "--run-dir", str(root), "--seed", "7", "--models", str(tmp_path / "m"),
                 "--epochs-lambda", "1", "--epochs-w", "200", "--lr-start", "1e300", "--lr-end", "1e300"])
    assert code == 4


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_documents_every_flag(command, capsys):
    with pytest.raises(SystemExit) as err:
        build_parser().parse_args([command, "--help"])
    assert err.value.code == 0
    text = capsys.readouterr().out
    for name in ("run_dir", "seed", *COMMANDS[command]):
        assert "--" + name.replace("_", "-") in text
        assert HELP[name].split()[0] in text
    assert "--config" in text
