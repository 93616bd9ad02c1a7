"""Command line: `speech2egg synth|train|infer|eval|report`"""

from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Tuple

import typer

from prefect_speech2egg.aai import TrainLog
from prefect_speech2egg.commands import (
    cmd_eval,
    cmd_infer,
    cmd_report,
    cmd_synth,
    cmd_train,
    load_run_config,
)
from prefect_speech2egg.config import RunConfig
from prefect_speech2egg.exceptions import ConfigError, Speech2EggError

app = typer.Typer(
    name="speech2egg",
    help="Estimate electroglottograph waveforms from speech and score them.",
    no_args_is_help=True,
    add_completion=False,
)


@contextmanager
def _exit_codes():
    """Turns package errors into their exit codes and others into 1."""
    try:
        yield
    except Speech2EggError as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(exc.exit_code)
    except Exception as exc:
        typer.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        raise typer.Exit(1)


def _config(
    path: Optional[Path], base: Optional[RunConfig] = None, **flags
) -> RunConfig:
    """Loads the YAML file, or starts from `base`, and applies the flags."""
    if path is not None:
        base = RunConfig.from_file(path)
    return (base or RunConfig()).with_overrides(**flags)


def parse_condition(text: str) -> Tuple[str, float]:
    """
    Parses a noise condition written as `kind@snr`, e.g. `white@10` or
    `babble@5dB`.
    """
    kind, sep, level = text.partition("@")
    level = level[: -len("dB")] if level.lower().endswith("db") else level
    try:
        if not sep or not kind:
            raise ValueError
        return kind, float(level)
    except ValueError:
        raise ConfigError(
            f"Noise condition {text!r} is not of the form kind@snr."
        ) from None


def _bit_depth(text: str):
    """Reads `--bit-depth`: an integer depth or `float`."""
    return int(text) if text.isdigit() else text


ConfigOption = typer.Option(
    None, "--config", "-c", help="YAML configuration; flags override its values."
)
DataDirOption = typer.Option(
    None, "--data-dir", help="Data root; defaults to $AAI_DATA_DIR or ./data."
)
SeedOption = typer.Option(None, "--seed", help="Base seed of every random draw.")


@app.command()
def synth(
    config: Optional[Path] = ConfigOption,
    n: Optional[int] = typer.Option(None, "--n", help="Utterances to generate."),
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", help="Corpus directory."),
    data_dir: Optional[Path] = DataDirOption,
):
    """
    Generate the synthetic speech/EGG corpus and its manifest.
    """
    with _exit_codes():
        manifest = out / "manifest.csv" if out is not None else None
        run_config = _config(
            config,
            seed=seed,
            data_dir=data_dir,
            manifest=manifest,
            synth__n_utterances=n,
        )
        typer.echo(cmd_synth(run_config))


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    data_dir: Optional[Path] = DataDirOption,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Manifest."),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory."),
    checkpoint: Optional[Path] = typer.Option(
        None, "--checkpoint", help="Checkpoint file to write."
    ),
    loss: Optional[str] = typer.Option(
        None, "--loss", help="Reconstruction term: cosine or l2."
    ),
    prior_steps: Optional[int] = typer.Option(None, "--prior-steps"),
    aai_steps: Optional[int] = typer.Option(None, "--aai-steps"),
    k_inner: Optional[int] = typer.Option(
        None, "--k", help="Encoder/decoder steps per discriminator step."
    ),
    batch_size: Optional[int] = typer.Option(None, "--batch-size"),
    lambda_adv: Optional[float] = typer.Option(None, "--lambda-adv"),
    noise_std: Optional[float] = typer.Option(None, "--noise-std"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    patience: Optional[int] = typer.Option(None, "--patience"),
    resume: Optional[Path] = typer.Option(
        None, "--resume", help="Continue adversarial training from a checkpoint."
    ),
):
    """
    Train the EGG prior and the adversarial speech-to-EGG model.
    """
    with _exit_codes():
        run_config = _config(
            config,
            seed=seed,
            data_dir=data_dir,
            manifest=manifest,
            out_dir=out,
            checkpoint=checkpoint,
            loss=loss,
            prior_steps=prior_steps,
            aai_steps=aai_steps,
            k_inner=k_inner,
            batch_size=batch_size,
            lambda_adv=lambda_adv,
            noise_std=noise_std,
            lr=lr,
            patience=patience,
        )
        path = cmd_train(run_config, resume=resume)
        log = TrainLog.from_csv(run_config.run_dir / "train_log.csv")
        typer.echo(path)
        typer.echo(f"final validation cosine distance: {log.last_val_cosine:.4f}")


@app.command()
def infer(
    checkpoint: Path = typer.Argument(..., help="Checkpoint written by train."),
    speech: Path = typer.Argument(..., help="Speech recording."),
    out: Path = typer.Argument(..., help="Where to write the estimated EGG."),
    stride: Optional[int] = typer.Option(
        None, "--stride", min=1, help="Hop between windows in samples."
    ),
    bit_depth: str = typer.Option(
        "float", "--bit-depth", help="WAV sample format: 16, 24, 32 or float."
    ),
):
    """
    Estimate the EGG of one speech recording.
    """
    with _exit_codes():
        typer.echo(cmd_infer(checkpoint, speech, out, stride, _bit_depth(bit_depth)))


@app.command(name="eval")
def evaluate(
    config: Optional[Path] = ConfigOption,
    checkpoint: Optional[Path] = typer.Option(
        None, "--checkpoint", help="Checkpoint written by train."
    ),
    data_dir: Optional[Path] = DataDirOption,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Manifest."),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory."),
    stride: Optional[int] = typer.Option(None, "--stride", min=1),
    noise: Optional[List[str]] = typer.Option(
        None, "--noise", help="Noise condition kind@snr; repeat for several."
    ),
    clean_only: bool = typer.Option(
        False, "--clean-only", help="Evaluate clean speech only."
    ),
    self_test: bool = typer.Option(
        False, "--self-test", help="Score every reference EGG against itself."
    ),
):
    """
    Score estimated EGGs on the test split under the noise sweep.
    """
    with _exit_codes():
        base = None
        if config is None and checkpoint is not None and not self_test:
            base = load_run_config(checkpoint)
        run_config = _config(
            config,
            base,
            data_dir=data_dir,
            manifest=manifest,
            out_dir=out,
            infer_stride=stride,
        )
        conditions = [parse_condition(text) for text in noise or []] or None
        result = cmd_eval(
            checkpoint,
            run_config,
            noise=[] if clean_only else conditions,
            self_test=self_test,
        )
        for key, report in result.reports.items():
            typer.echo(
                f"{key}: GCI IDR {report.gci.idr:.2f}% MR {report.gci.mr:.2f}% "
                f"FAR {report.gci.far:.2f}% IDA {report.gci.ida:.3f} ms"
            )
        typer.echo(run_config.run_dir / "results.json")


@app.command()
def report(
    results: List[Path] = typer.Argument(..., help="results.json files of eval."),
    out: Path = typer.Option(Path("report"), "--out", help="Report directory."),
):
    """
    Render tables and plots from saved evaluation results.
    """
    with _exit_codes():
        typer.echo(cmd_report(results, out))
