from pathlib import Path

import pytest

from prefect_speech2egg.config import RunConfig
from prefect_speech2egg.exceptions import ConfigError


def test_defaults_and_derived_paths(tmp_path):
    config = RunConfig(data_dir=tmp_path)
    assert config.window_len == 192
    assert config.manifest_path == tmp_path / "corpus" / "manifest.csv"
    assert config.run_dir == tmp_path / "run"
    assert config.checkpoint_path == tmp_path / "run" / "checkpoint.npz"
    assert config.babble_path == tmp_path / "corpus" / "babble.wav"
    explicit = RunConfig(
        data_dir=tmp_path,
        manifest=tmp_path / "elsewhere" / "m.csv",
        out_dir=tmp_path / "out",
    )
    assert explicit.checkpoint_path == tmp_path / "out" / "checkpoint.npz"
    assert explicit.babble_path == tmp_path / "elsewhere" / "babble.wav"


def test_data_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("AAI_DATA_DIR", str(tmp_path))
    assert RunConfig().data_dir == tmp_path
    monkeypatch.delenv("AAI_DATA_DIR")
    assert RunConfig().data_dir == Path("data")


def test_settings_follow_configuration():
    config = RunConfig(loss="l2", prior_steps=7, aai_steps=9, seed=5)
    assert config.prior_settings().loss == "cosine"
    assert config.prior_settings().steps == 7
    assert config.aai_settings().loss == "l2"
    assert config.aai_settings().steps == 9
    architecture = config.architecture()
    assert architecture.window_len == 192
    assert architecture.encoder_widths == (160, 128, 96, 64, 32)
    spec = config.corpus_spec()
    assert spec.seed == 5
    assert spec.rate == 16000


@pytest.mark.parametrize(
    "values, match",
    [
        ({"loss": "l1"}, "unknown loss"),
        ({"beta1": 1.0}, "Adam decay"),
        ({"encoder_widths": [8, 0]}, "widths must be positive"),
        ({"sweep": {"kinds": ["pink"]}}, "unknown noise kind"),
    ],
)
def test_invalid_values(values, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig().with_overrides(**values)


def test_with_overrides():
    base = RunConfig(seed=1)
    config = base.with_overrides(seed=None, lr=0.01, synth__n_utterances=12)
    assert config.seed == 1
    assert config.lr == 0.01
    assert config.synth.n_utterances == 12
    assert base.synth.n_utterances == 200
    with pytest.raises(ConfigError, match="Unknown setting group 'nope'"):
        base.with_overrides(nope__x=1)
    with pytest.raises(ConfigError, match="Unknown settings in the overrides: bogus"):
        base.with_overrides(bogus=1)
    with pytest.raises(ConfigError, match="Invalid settings"):
        base.with_overrides(synth__bogus=1)


def test_from_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 9\nloss: l2\nsynth:\n  n_utterances: 3\n")
    config = RunConfig.from_file(path)
    assert (config.seed, config.loss, config.synth.n_utterances) == (9, "l2", 3)
    assert config.lr == RunConfig().lr
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert RunConfig.from_file(empty).seed == 0


@pytest.mark.parametrize(
    "text, match",
    [
        ("- a\n- b\n", "must hold a mapping"),
        ("seed: [\n", "is not YAML"),
        ("sede: 3\n", "Unknown settings in .*: sede"),
        ("seed: many\n", "Invalid settings"),
    ],
)
def test_from_file_errors(tmp_path, text, match):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_file(path)


def test_from_file_missing(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read configuration"):
        RunConfig.from_file(tmp_path / "missing.yaml")


def test_snapshot_round_trip(tmp_path):
    config = RunConfig(data_dir=tmp_path, seed=4).with_overrides(
        sweep__snrs=[0.0, 10.0]
    )
    snapshot = config.snapshot()
    assert snapshot["seed"] == 4
    assert snapshot["data_dir"] == str(tmp_path)
    assert "block_type_slug" not in snapshot
    restored = RunConfig.from_snapshot(snapshot)
    assert restored.snapshot() == snapshot
    assert restored.sweep.snrs == [0.0, 10.0]
