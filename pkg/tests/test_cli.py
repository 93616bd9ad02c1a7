import numpy as np
import pytest
import yaml
from typer.testing import CliRunner

from prefect_speech2egg.cli import app, parse_condition
from prefect_speech2egg.exceptions import ConfigError
from prefect_speech2egg.signal_io import Waveform, load_manifest, save_waveform

from .conftest import TINY_SETTINGS, TINY_SYNTH

runner = CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    values = {**TINY_SETTINGS, "synth": TINY_SYNTH, "data_dir": str(tmp_path / "d")}
    path.write_text(yaml.safe_dump(values))
    return path


def test_pipeline(tmp_path, config_file):
    result = runner.invoke(app, ["synth", "-c", str(config_file)])
    assert result.exit_code == 0, result.output
    manifest = tmp_path / "d" / "corpus" / "manifest.csv"
    assert manifest.exists()

    result = runner.invoke(app, ["train", "-c", str(config_file)])
    assert result.exit_code == 0, result.output
    assert "final validation cosine distance" in result.output
    checkpoint = tmp_path / "d" / "run" / "checkpoint.npz"
    assert checkpoint.exists()

    speech = load_manifest(manifest).split("test")[0].speech_path
    out = tmp_path / "estimate.wav"
    result = runner.invoke(
        app, ["infer", str(checkpoint), str(speech), str(out), "--bit-depth", "16"]
    )
    assert result.exit_code == 0, result.output
    assert out.exists()

    result = runner.invoke(
        app, ["eval", "-c", str(config_file), "--noise", "white@5dB"]
    )
    assert result.exit_code == 0, result.output
    assert "clean: GCI IDR" in result.output
    assert "white@5dB: GCI IDR" in result.output
    results = tmp_path / "d" / "run" / "results.json"
    assert results.exists()

    result = runner.invoke(
        app, ["report", str(results), "--out", str(tmp_path / "report")]
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "report" / "report.txt").exists()


def test_eval_self_test_clean_only(config_file):
    assert runner.invoke(app, ["synth", "-c", str(config_file)]).exit_code == 0
    result = runner.invoke(
        app, ["eval", "-c", str(config_file), "--self-test", "--clean-only"]
    )
    assert result.exit_code == 0, result.output
    assert "clean: GCI IDR 100.00%" in result.output
    assert not any(line.startswith("white@") for line in result.output.splitlines())


@pytest.mark.parametrize(
    "args",
    [
        ["train", "-c", "missing.yaml"],
        ["train", "--loss", "l1"],
        ["eval", "--self-test", "--noise", "white"],
        ["eval", "--self-test", "--noise", "pink@5"],
    ],
)
def test_configuration_errors_exit_2(config_file, args):
    if "-c" not in args:
        args = [*args, "-c", str(config_file)]
    result = runner.invoke(app, args)
    assert result.exit_code == 2, result.output
    assert "Error:" in result.output


def test_short_speech_exits_3(tmp_path, trained_run):
    speech = Waveform(np.random.default_rng(0).normal(size=10) * 0.1, 16000)
    path = save_waveform(speech, tmp_path / "short.wav")
    result = runner.invoke(
        app,
        ["infer", str(trained_run.checkpoint_path), str(path), str(tmp_path / "o.wav")],
    )
    assert result.exit_code == 3, result.output
    assert "too short" in result.output


def test_unwritable_directory_exits_3(tmp_path, config_file):
    blocker = tmp_path / "file"
    blocker.write_text("")
    result = runner.invoke(
        app, ["synth", "-c", str(config_file), "--out", str(blocker / "corpus")]
    )
    assert result.exit_code == 3, result.output


def test_divergence_exits_4(tmp_path, trained_run):
    args = [
        "train",
        "--manifest",
        str(trained_run.manifest_path),
        "--out",
        str(tmp_path / "run"),
        "--prior-steps",
        "0",
        "--aai-steps",
        "20",
        "--batch-size",
        "16",
        "--loss",
        "l2",
        "--lr",
        "1e300",
    ]
    with np.errstate(all="ignore"):
        result = runner.invoke(app, args)
    assert result.exit_code == 4, result.output
    assert "Error:" in result.output


@pytest.mark.parametrize(
    "text, expected",
    [
        ("white@10", ("white", 10.0)),
        ("babble@5dB", ("babble", 5.0)),
        ("white@-3.5db", ("white", -3.5)),
    ],
)
def test_parse_condition(text, expected):
    assert parse_condition(text) == expected


@pytest.mark.parametrize("text", ["white", "@5", "white@loud"])
def test_parse_condition_rejects(text):
    with pytest.raises(ConfigError, match="kind@snr"):
        parse_condition(text)
