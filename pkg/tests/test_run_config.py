from pathlib import Path

import pytest

from errors import ConfigError
from run_config import RunConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, *lines):
    path = tmp_path / "run.env"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_example_config_loads():
    config = RunConfig.from_file(CONFIGS / "example.env")
    assert config.fields_t == (0.2602, 0.3263, 0.4092)
    assert config.seed == 20240917
    assert config.exclude_blended is True
    assert Path(config.constants_file).is_file()
    params = config.obe_params()
    assert params.n_velocity == 81
    assert params.intensity == pytest.approx(2 * 6e-3 / (3.141592653589793 * 0.84e-3 ** 2))


def test_weak_probe_config_loads():
    config = RunConfig.from_file(CONFIGS / "weak_probe.env")
    assert config.spectrum_model == "weak-probe"
    assert config.n_mc == 200
    assert config.obe_params().temperature_k == 1.0


def test_relative_paths_follow_the_config_file(tmp_path):
    config = RunConfig.from_file(_write(tmp_path, "SCHEMA_VERSION=1", "OUTPUT_DIR=results"))
    assert config.output_dir == str((tmp_path / "results").resolve())
    assert config.source == str(tmp_path / "run.env")


@pytest.mark.parametrize("lines, message", [
    (["FIELDS_T=0.4"], "SCHEMA_VERSION"),
    (["SCHEMA_VERSION=2"], "SCHEMA_VERSION"),
    (["SCHEMA_VERSION=1", "FIELD_T=0.4"], "unknown keys"),
    (["SCHEMA_VERSION=1", "SEED="], "no value"),
    (["SCHEMA_VERSION=1", "WEIGHTED=maybe"], "WEIGHTED"),
    (["SCHEMA_VERSION=1", "MC_TRIALS=50"], "MC_TRIALS"),
    (["SCHEMA_VERSION=1", "BOUND_LOW_T=0.5", "BOUND_HIGH_T=0.2"], "bounds"),
    (["SCHEMA_VERSION=1", "CONSTANTS_FILE=missing.env"], "constants file"),
    (["SCHEMA_VERSION=1", "SPECTRUM_MODEL=quantum"], "SPECTRUM_MODEL"),
    (["SCHEMA_VERSION=1", "REFERENCE_WINDOW_LOW_SAMPLE=10"], "go together"),
])
def test_strict_validation(tmp_path, lines, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_file(_write(tmp_path, *lines))


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file("/nonexistent/run.env")


def test_load_uses_environment(tmp_path, monkeypatch):
    path = _write(tmp_path, "SCHEMA_VERSION=1", "SEED=12")
    monkeypatch.setenv("HPBMAG_CONFIG", str(path))
    assert RunConfig.load().seed == 12
    monkeypatch.delenv("HPBMAG_CONFIG")
    monkeypatch.delenv("HPBMAG_CONSTANTS", raising=False)
    assert RunConfig.load().seed is None


def test_seed_and_digest(tmp_path):
    config = RunConfig()
    with pytest.raises(ConfigError, match="SEED"):
        config.require_seed()
    assert config.replace(seed=3).require_seed() == 3
    assert config.digest() == config.replace(output_dir=str(tmp_path)).digest()
    assert config.digest() != config.replace(n_mc=500).digest()


def test_anchor_and_reference_window():
    config = RunConfig(anchor_sample=120.5, anchor_detuning_mhz=-30.0, reference_low=10, reference_high=200)
    assert config.anchor == (120.5, -30.0)
    assert config.reference_window == (10, 200)
    assert RunConfig().anchor is None and RunConfig().reference_window is None
