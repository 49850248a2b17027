import json
from pathlib import Path

import pytest

from coaxmpi.app.config import RunConfig, env_log_level, env_out_dir, env_threads, load_run_config
from coaxmpi.app.errors import ConfigurationError

SMALL_CONFIG = {
    "seed": 3,
    "dataset": {"n": 50, "mode": "analytic"},
    "train": {"k_trees": 10, "max_depth": 2},
    "tpe": {"mu_th": 4, "n_startup": 2},
}


def write_config(tmp_path, doc) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_defaults_without_a_file():
    config = load_run_config(None)
    assert config == RunConfig()
    assert [m.f for m in config.modulations] == [12.5e6, 18.75e6, 25e6, 31.25e6]
    assert config.dataset.n == 100_000
    assert config.toggles.shot and config.toggles.avalanche
    assert not config.scene.toggles.any_stochastic


def test_partial_file_keeps_other_defaults(tmp_path):
    config = load_run_config(write_config(tmp_path, SMALL_CONFIG))
    assert config.seed == 3
    assert config.dataset.mode == "analytic"
    assert config.train.k_trees == 10 and config.train.learning_rate == 0.1
    assert config.sensor.m_gain == 50.0


def test_missing_file_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "nope.json")


@pytest.mark.parametrize(
    "doc",
    [
        "{not json",
        json.dumps({"unknown_key": 1}),
        json.dumps({"schema_version": 2}),
        json.dumps({"dataset": {"n": 0}}),
        json.dumps({"modulations": [{"f": 12.5e6}, {"f": 25e6}, {"f": 31.25e6}]}),
        json.dumps({"modulations": [{"f": f} for f in (31.25e6, 25e6, 18.75e6, 12.5e6)]}),
        json.dumps({"tpe": {"mu_th": 5, "n_startup": 5}}),
        json.dumps([1, 2, 3]),
    ],
)
def test_invalid_files_are_configuration_errors(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(doc)
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def test_seeded_pushes_master_seed_everywhere():
    config = RunConfig().seeded(42)
    assert config.seed == 42
    assert config.train.seed == 42
    assert config.tpe.seed == 42
    assert RunConfig(seed=5).seeded(None).train.seed == 5


def test_digest_tracks_content():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig().digest() != RunConfig().seeded(1).digest()


def test_env_threads(monkeypatch):
    monkeypatch.delenv("COAXMPI_THREADS", raising=False)
    assert env_threads() == 1
    monkeypatch.setenv("COAXMPI_THREADS", "4")
    assert env_threads() == 4
    for bad in ("0", "many"):
        monkeypatch.setenv("COAXMPI_THREADS", bad)
        with pytest.raises(ConfigurationError):
            env_threads()


def test_env_out_dir_and_log_level(monkeypatch):
    monkeypatch.delenv("COAXMPI_OUT", raising=False)
    monkeypatch.delenv("COAXMPI_LOG_LEVEL", raising=False)
    assert env_out_dir() == Path("artifacts")
    assert env_log_level() == "INFO"
    monkeypatch.setenv("COAXMPI_OUT", "/tmp/runs")
    monkeypatch.setenv("COAXMPI_LOG_LEVEL", "debug")
    assert env_out_dir() == Path("/tmp/runs")
    assert env_log_level() == "DEBUG"
