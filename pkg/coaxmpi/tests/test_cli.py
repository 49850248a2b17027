import json
from unittest.mock import patch

import pytest

from coaxmpi.app.commands.pipeline import GenerateResult, mhz_label
from coaxmpi.app.main import EXIT_CONFIG, EXIT_FAILURE, EXIT_FORMAT, EXIT_IO, EXIT_OK, build_parser, main
from coaxmpi.app.services.artifacts import read_json
from coaxmpi.app.services.dataset_gen import CSV_HEADER
from coaxmpi.app.services.tpe_opt import ParamSpec

TINY_CONFIG = {
    "seed": 7,
    "dataset": {"n": 200, "mode": "analytic"},
    "train": {"k_trees": 15, "max_depth": 3},
    "tpe": {"mu_th": 3, "n_startup": 1},
    "tune": {"max_rows": 200},
    "knn_k": 3,
    "corner": {"width": 8, "height": 4},
    "scene": {"mode": "analytic"},
}

SMALL_GBTREE_SPACE = (
    ParamSpec(name="k_trees", kind="int_uniform", min=5, max=10),
    ParamSpec(name="max_depth", kind="int_uniform", min=2, max=3),
    ParamSpec(name="learning_rate", kind="log_uniform", min=0.1, max=0.3),
)


def write_config(tmp_path, doc=None):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc or TINY_CONFIG))
    return path


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def last_json_line(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_mhz_label():
    assert mhz_label(31.25e6) == "31.25MHz"
    assert mhz_label(12.5e6) == "12.5MHz"


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for command in ("generate", "tune", "train", "eval", "scene", "report"):
        assert parser.parse_args([command]).command == command
    with pytest.raises(SystemExit):
        parser.parse_args(["generate", "--mode", "hybrid"])


@patch("coaxmpi.app.main.pipeline.cmd_generate")
def test_generate_flags_override_config(mock_generate, tmp_path, capsys):
    mock_generate.return_value = GenerateResult(dataset="dataset.csv", n=5, seed=9, raw_mae_mm={})

    code = run_cli("generate", "--config", write_config(tmp_path), "--seed", 9, "--out", tmp_path,
                   "--threads", 2, "--n", 5, "--mode", "trace")

    assert code == EXIT_OK
    config, out = mock_generate.call_args.args
    assert out == tmp_path
    assert config.seed == 9 and config.train.seed == 9
    assert config.dataset.mode == "trace"
    assert mock_generate.call_args.kwargs == {"n": 5, "threads": 2}
    assert last_json_line(capsys)["n"] == 5


@patch("coaxmpi.app.main.pipeline.cmd_generate")
def test_unexpected_failure_exits_with_one(mock_generate, tmp_path):
    mock_generate.side_effect = RuntimeError("boom")
    assert run_cli("generate", "--out", tmp_path, "--threads", 1) == EXIT_FAILURE


def test_configuration_problems_exit_with_two(tmp_path):
    assert run_cli("generate", "--config", tmp_path / "missing.json", "--out", tmp_path) == EXIT_CONFIG
    assert run_cli("generate", "--out", tmp_path, "--threads", 0) == EXIT_CONFIG
    assert run_cli("generate", "--out", tmp_path, "--threads", 1, "--n", 0) == EXIT_CONFIG


def test_threads_fall_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("COAXMPI_THREADS", "zero")
    assert run_cli("generate", "--out", tmp_path) == EXIT_CONFIG


def test_malformed_dataset_exits_with_three(tmp_path):
    dataset = tmp_path / "dataset.csv"
    dataset.write_text("depth,target\n1.9,1.9\n")
    assert run_cli("train", "--out", tmp_path, "--dataset", dataset) == EXIT_FORMAT


def test_malformed_model_exits_with_three(tmp_path):
    dataset = tmp_path / "dataset.csv"
    dataset.write_text(",".join(CSV_HEADER) + "\n" + "1.9,1.9,1.9,1.9,0.05,0.05,0.05,0.05,1.9\n" * 3)
    model = tmp_path / "model.json"
    model.write_text('{"schema_version": 99}')
    assert run_cli("eval", "--out", tmp_path, "--dataset", dataset, "--model", model) == EXIT_FORMAT


@pytest.mark.parametrize("n_rows", [2, 3, 4])
def test_dataset_too_small_to_split_exits_with_three(tmp_path, n_rows):
    dataset = tmp_path / "dataset.csv"
    dataset.write_text(",".join(CSV_HEADER) + "\n" + "1.9,1.9,1.9,1.9,0.05,0.05,0.05,0.05,1.9\n" * n_rows)
    assert run_cli("train", "--out", tmp_path, "--dataset", dataset, "--threads", 1) == EXIT_FORMAT


def test_missing_dataset_exits_with_four(tmp_path):
    assert run_cli("train", "--out", tmp_path, "--dataset", tmp_path / "missing.csv") == EXIT_IO


def test_generate_is_deterministic_across_output_directories(tmp_path):
    config = write_config(tmp_path, {**TINY_CONFIG, "dataset": {"n": 30, "mode": "analytic"}})
    for name in ("one", "two"):
        assert run_cli("generate", "--config", config, "--out", tmp_path / name, "--threads", 1) == EXIT_OK

    outputs = ("dataset.csv", "dataset.meta.json", "raw_error_histogram.csv", "dataset_summary.json", "manifest.json")
    for name in outputs:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


@patch("coaxmpi.app.services.tpe_opt.GBTREE_SEARCH_SPACE", SMALL_GBTREE_SPACE)
def test_full_pipeline_on_a_tiny_run(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "artifacts"
    common = ("--config", config, "--out", out, "--threads", 1)

    assert run_cli("generate", *common) == EXIT_OK
    generated = last_json_line(capsys)
    assert generated["n"] == 200
    assert set(generated["raw_mae_mm"]) == {"12.5MHz", "18.75MHz", "25MHz", "31.25MHz"}

    assert run_cli("tune", *common) == EXIT_OK
    tuned = last_json_line(capsys)
    assert tuned["trials"] == 3
    assert 5 <= tuned["best_params"]["k_trees"] <= 10
    assert 1 <= tuned["knn_k"] <= 50

    assert run_cli("train", *common) == EXIT_OK
    trained = last_json_line(capsys)
    assert trained["n_trees"] == read_json(out / "hyperparams.json")["gbtree"]["k_trees"]

    assert run_cli("eval", *common) == EXIT_OK
    evaluated = last_json_line(capsys)
    assert evaluated["corrected_test"]["n"] == 40

    assert run_cli("scene", *common, "--model", out / "model.json") == EXIT_OK
    scene = last_json_line(capsys)
    assert "corrected_depth.pfm" in scene["files"]
    assert "corrected" in scene["metrics"]
    assert "correction_mask.pgm" in scene["files"]
    assert scene["metrics"]["raw_on_corrected"]["n"] == scene["metrics"]["corrected"]["n"]

    assert run_cli("report", *common) == EXIT_OK
    report = last_json_line(capsys)
    assert [row["model"] for row in report["rows"]] == ["gbtree", "knn"]
    text = (out / "report.txt").read_text()
    assert "raw 31.25MHz test MAE" in text
    assert "scene: raw MAE" in text
    assert "gbtree against the correction targets:" in text
    assert [check["name"] for check in report["acceptance"]][0] == "test MAE (mm)"
    assert all(isinstance(check["passed"], bool) for check in report["acceptance"])

    manifest = read_json(out / "manifest.json")
    assert set(manifest["commands"]) == {"generate", "tune", "train", "eval", "scene", "report"}
    for entry in manifest["commands"].values():
        assert entry["seed"] == 7
        assert all((out / name).exists() for name in entry["files"])
