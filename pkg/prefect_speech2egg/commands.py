"""Prefect flows running the synth, train, infer, eval and report steps"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from matplotlib.figure import Figure
from prefect import flow, task
from prefect.logging import get_run_logger

from prefect_speech2egg.aai import (
    AAIModel,
    PriorModel,
    TrainLog,
    from_checkpoint,
    infer,
    to_checkpoint,
    train_aai,
    train_prior,
)
from prefect_speech2egg.config import RunConfig
from prefect_speech2egg.eggmetrics import (
    MetricsReport,
    UtteranceMeasurement,
    compare_reports,
    detect_voicing,
    measure_utterance,
    render_comparison_table,
    render_table,
    window_l2,
)
from prefect_speech2egg.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
)
from prefect_speech2egg.neuralcore import (
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from prefect_speech2egg.preprocess import (
    FrameDataset,
    NoiseSpec,
    add_noise,
    frame_many,
    noise_ladder,
    normalize_polarity,
    normalize_speech_polarity,
)
from prefect_speech2egg.signal_io import (
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    load_pair,
    load_waveform,
    save_waveform,
)
from prefect_speech2egg.synthdata import synth_corpus
from prefect_speech2egg.utilities import derive_seed

CLEAN = "clean"
PLOTTED = ("idr", "mr", "far", "ida")


@dataclass
class ExperimentResult:
    """
    Metrics reports of every evaluated condition plus the configuration that
    produced them.

    Attributes:
        config: Configuration snapshot.
        reports: One report per condition, `clean` first.
        train_logs: Training log files of the evaluated model.
    """

    config: Dict[str, Any]
    reports: Dict[str, MetricsReport]
    train_logs: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        """JSON-safe dict of the configuration, reports and log paths."""
        return {
            "config": self.config,
            "reports": {key: report.to_json() for key, report in self.reports.items()},
            "train_logs": self.train_logs,
        }

    def save(self, path: Union[str, os.PathLike]) -> Path:
        """Writes the result as JSON, creating parent directories."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "ExperimentResult":
        """Reads a result written by `save`."""
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(
                f"Cannot read experiment result {str(path)!r}: {exc}"
            ) from exc
        try:
            reports = {
                key: MetricsReport.from_json(value)
                for key, value in data["reports"].items()
            }
            return cls(data["config"], reports, dict(data.get("train_logs", {})))
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"Malformed experiment result {str(path)!r}.") from exc


def _require(path: Path, what: str) -> Path:
    """Returns `path`, raising ConfigError when it does not exist."""
    if not path.exists():
        raise ConfigError(f"The {what} {str(path)!r} does not exist.")
    return path


def _make_dir(path: Path) -> Path:
    """Creates a writable directory or raises DataError."""
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"Cannot create directory {str(path)!r}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"Directory {str(path)!r} is not writable.")
    return path


def _condition(key: str) -> Tuple[str, float]:
    """Splits a report key like `white@5dB` into kind and SNR; clean is +inf."""
    kind, _, level = key.partition("@")
    return kind, float(level[: -len("dB")]) if level else math.inf


@task
def prepare_frames(
    manifest: DatasetManifest, split: str, config: RunConfig
) -> FrameDataset:
    """
    Loads, polarity-normalizes and frames every utterance of one split;
    windows with a silent EGG target are dropped.

    Args:
        manifest: The corpus manifest.
        split: `"train"`, `"val"` or `"test"`.
        config: The run configuration.

    Returns:
        The frames of the split.
    """
    logger = get_run_logger()
    pairs = [
        normalize_polarity(
            load_pair(entry.speech_path, entry.egg_path, config.rate, id=entry.id)
        )
        for entry in manifest.split(split)
    ]
    frames = frame_many(
        pairs, window_ms=config.window_ms, stride=config.train_stride, rate=config.rate
    ).without_silent_targets(config.silence_floor)
    logger.info(f"Framed {len(pairs)} {split} utterances into {len(frames)} windows.")
    return frames


@task
def fit_prior(
    train: FrameDataset, val: Optional[FrameDataset], config: RunConfig
) -> Tuple[PriorModel, TrainLog]:
    """
    Trains the EGG autoencoder.
    """
    return train_prior(
        train, config.prior_settings(), config.architecture(), val_dataset=val
    )


@task
def fit_aai(
    train: FrameDataset,
    prior: PriorModel,
    val: Optional[FrameDataset],
    config: RunConfig,
    resume: Optional[Checkpoint] = None,
):
    """
    Trains the speech encoder, decoder and discriminator adversarially.
    """
    return train_aai(
        train,
        prior,
        config.aai_settings(),
        config.architecture(),
        val_dataset=val,
        resume=resume,
    )


@flow(name="speech2egg-synth")
def cmd_synth(
    config: Optional[RunConfig] = None, out_dir: Optional[Path] = None
) -> Path:
    """
    Generates the synthetic corpus: paired speech and EGG files, truth
    records, a babble source and the manifest.

    Args:
        config: The run configuration; `synth` holds the generator settings.
        out_dir: Corpus directory; defaults to the manifest's directory.

    Returns:
        Path of the written manifest.

    Example:
        ```python
        from prefect_speech2egg import RunConfig, cmd_synth

        manifest_path = cmd_synth(RunConfig().with_overrides(synth__n_utterances=20))
        ```
    """
    config = config or RunConfig()
    out_dir = Path(out_dir) if out_dir else config.manifest_path.parent
    _make_dir(out_dir)
    synth_corpus(config.corpus_spec(), out_dir)
    (out_dir / "corpus.json").write_text(
        json.dumps({"config": config.snapshot()}, indent=2, sort_keys=True) + "\n"
    )
    return out_dir / "manifest.csv"


@flow(name="speech2egg-train")
def cmd_train(
    config: Optional[RunConfig] = None, resume: Optional[Path] = None
) -> Path:
    """
    Trains the EGG prior and then the adversarial model on the train split,
    validating on the val split. Writes the checkpoint plus `prior_log.csv`
    and `train_log.csv` into the run directory.

    Args:
        config: The run configuration.
        resume: A checkpoint of an interrupted run; its prior is reused and
            adversarial training continues from its step counter.

    Returns:
        Path of the written checkpoint.

    Example:
        ```python
        from prefect_speech2egg import RunConfig, cmd_train

        checkpoint_path = cmd_train(RunConfig.from_file("run.yaml"))
        ```
    """
    logger = get_run_logger()
    config = config or RunConfig()
    manifest = load_manifest(_require(config.manifest_path, "manifest"), config.rate)
    run_dir = _make_dir(config.run_dir)
    train = prepare_frames(manifest, "train", config)
    if not len(train):
        raise DataError("The train split holds no usable windows.")
    val = prepare_frames(manifest, "val", config)
    val = val if len(val) else None

    previous = TrainLog()
    checkpoint = None
    if resume is not None:
        checkpoint = load_checkpoint(_require(Path(resume), "resume checkpoint"))
        prior, model = from_checkpoint(checkpoint)
        if model is None:
            checkpoint = None
        elif (run_dir / "train_log.csv").exists():
            previous = TrainLog.from_csv(run_dir / "train_log.csv", config.k_inner)
            previous.records = [
                r for r in previous.records if r.step <= checkpoint.step
            ]
    else:
        prior, prior_log = fit_prior(train, val, config)
        prior_log.to_csv(run_dir / "prior_log.csv")
        save_checkpoint(
            to_checkpoint(prior, config=config.snapshot(), stage="prior"),
            config.checkpoint_path,
        )

    model, log, state = fit_aai(train, prior, val, config, resume=checkpoint)
    previous.extend(log)
    previous.to_csv(run_dir / "train_log.csv")
    path = save_checkpoint(
        to_checkpoint(prior, model, state, config.snapshot()), config.checkpoint_path
    )
    logger.info(
        f"Wrote checkpoint to {str(path)!r} at step {state.step}; final validation "
        f"cosine distance {previous.last_val_cosine:.4f}."
    )
    return path


def _load_model(checkpoint_path: Path) -> Tuple[AAIModel, Checkpoint]:
    """The model and checkpoint at `checkpoint_path`; prior-only is an error."""
    checkpoint = load_checkpoint(_require(Path(checkpoint_path), "checkpoint"))
    _, model = from_checkpoint(checkpoint)
    if model is None:
        raise CheckpointError(
            f"Checkpoint {str(checkpoint_path)!r} holds only the EGG prior."
        )
    return model, checkpoint


def _checkpoint_config(checkpoint: Checkpoint) -> RunConfig:
    """The configuration stored in a checkpoint, or the defaults."""
    if not checkpoint.config:
        return RunConfig()
    return RunConfig.from_snapshot(checkpoint.config)


def load_run_config(checkpoint_path: Path) -> RunConfig:
    """
    The configuration a checkpoint was trained with.
    """
    checkpoint = load_checkpoint(_require(Path(checkpoint_path), "checkpoint"))
    return _checkpoint_config(checkpoint)


@flow(name="speech2egg-infer")
def cmd_infer(
    checkpoint: Path,
    speech_path: Path,
    out_path: Path,
    stride: Optional[int] = None,
    bit_depth: Union[int, str] = "float",
) -> Path:
    """
    Estimates the EGG of one speech recording and writes it as a WAV file of
    the same length.

    Args:
        checkpoint: A checkpoint written by `cmd_train`.
        speech_path: The speech recording.
        out_path: Where to write the estimated EGG.
        stride: Hop between windows; defaults to the checkpoint's infer stride.
        bit_depth: WAV sample format of the output.

    Returns:
        Path of the written EGG.
    """
    logger = get_run_logger()
    model, stored = _load_model(checkpoint)
    config = _checkpoint_config(stored)
    speech, warning = normalize_speech_polarity(
        load_waveform(speech_path, "speech", config.rate)
    )
    if warning:
        logger.warning(f"{str(speech_path)!r}: {warning}.")
    egg = infer(model, speech, stride or config.infer_stride)
    path = save_waveform(egg, out_path, bit_depth)
    logger.info(f"Wrote estimated EGG ({egg.duration:.2f} s) to {str(path)!r}.")
    return path


@task
def evaluate_utterance(
    entry: ManifestEntry,
    model: Optional[AAIModel],
    conditions: Sequence[NoiseSpec],
    config: RunConfig,
    self_test: bool = False,
) -> Dict[str, Tuple[UtteranceMeasurement, UtteranceMeasurement, float]]:
    """
    Measures the reference EGG of one test utterance and the EGG estimated
    from its speech under every condition.

    Returns:
        Per condition, the reference measurement, the estimate's measurement
        and the per-window L2 distance.
    """
    pair = normalize_polarity(
        load_pair(entry.speech_path, entry.egg_path, config.rate, id=entry.id)
    )
    voicing = detect_voicing(pair.egg)
    reference = measure_utterance(pair.egg, voicing, "reference")
    results = {}
    for spec in [None, *conditions]:
        key = CLEAN if spec is None else spec.key
        if self_test:
            estimate = pair.egg
        else:
            speech = pair.speech
            if spec is not None:
                spec = spec.with_seed(derive_seed(config.seed, key, entry.id))
                speech = add_noise(speech, spec)
            estimate = infer(model, speech, config.infer_stride)
        measured = measure_utterance(estimate, voicing, "estimated")
        distance = window_l2(pair.egg, estimate, config.window_len)
        results[key] = (reference, measured, distance)
    return results


def plot_sweep(result: ExperimentResult, out_dir: Path) -> List[Path]:
    """
    One PNG per noise kind with IDR, MR, FAR and IDA of the GCIs versus SNR;
    the clean condition is drawn as a dashed line.
    """
    kinds: Dict[str, List[Tuple[float, MetricsReport]]] = {}
    for key, report in result.reports.items():
        if key != CLEAN:
            kind, snr = _condition(key)
            kinds.setdefault(kind, []).append((snr, report))
    clean = result.reports.get(CLEAN)
    paths = []
    for kind, points in kinds.items():
        points.sort(key=lambda point: point[0])
        snrs = [snr for snr, _ in points]
        figure = Figure(figsize=(8, 6))
        axes = figure.subplots(2, 2, sharex=True)
        for axis, name in zip(axes.flat, PLOTTED):
            axis.plot(snrs, [getattr(r.gci, name) for _, r in points], marker="o")
            if clean is not None:
                axis.axhline(getattr(clean.gci, name), linestyle="--", color="gray")
            unit = "ms" if name == "ida" else "%"
            axis.set_title(f"GCI {name.upper()} ({unit})")
            axis.set_xlabel("SNR (dB)")
        figure.suptitle(f"{kind} noise")
        figure.tight_layout()
        path = out_dir / f"sweep_{kind}.png"
        figure.savefig(path, metadata={"Software": None})
        paths.append(path)
    return paths


@flow(name="speech2egg-eval")
def cmd_eval(
    checkpoint: Optional[Path] = None,
    config: Optional[RunConfig] = None,
    noise: Optional[List[Tuple[str, float]]] = None,
    self_test: bool = False,
) -> ExperimentResult:
    """
    Evaluates a trained model on the test split: for clean speech and every
    noise condition, the EGG estimated from speech is compared with the
    reference EGG. Writes `results.json`, `results.txt` and one sweep plot per
    noise kind into the run directory.

    Args:
        checkpoint: A checkpoint written by `cmd_train`; defaults to the
            configured checkpoint. Not needed with `self_test`.
        config: The run configuration; defaults to the checkpoint's.
        noise: Explicit (kind, SNR dB) conditions; defaults to the configured
            sweep. An empty list evaluates clean speech only.
        self_test: Score every reference EGG against itself instead of
            running the model.

    Returns:
        One metrics report per condition.
    """
    logger = get_run_logger()
    model, stored = None, None
    if not self_test:
        default = (config or RunConfig()).checkpoint_path
        model, stored = _load_model(Path(checkpoint) if checkpoint else default)
    if config is None:
        config = _checkpoint_config(stored) if stored else RunConfig()
    manifest = load_manifest(_require(config.manifest_path, "manifest"), config.rate)
    entries = manifest.split("test")
    if not entries:
        raise DataError("The test split of the manifest is empty.")

    if noise is None:
        sweep = config.sweep
        noise = [(kind, snr) for kind in sweep.kinds for snr in sweep.snrs]
    babble = None
    if any(kind == "babble" for kind, _ in noise):
        babble = load_waveform(
            _require(config.babble_path, "babble source"), "speech", config.rate
        )
    conditions = [
        spec
        for kind, snr in noise
        for spec in noise_ladder([kind], [snr], config.seed, babble)
    ]

    collected: Dict[str, list] = {}
    for entry in entries:
        outcome = evaluate_utterance(entry, model, conditions, config, self_test)
        for key, value in outcome.items():
            collected.setdefault(key, []).append(value)

    snapshot = config.snapshot()
    reports = {}
    for key, values in collected.items():
        reports[key] = compare_reports(
            [reference for reference, _, _ in values],
            [estimate for _, estimate, _ in values],
            dataset=key,
            window_l2=float(sum(d for _, _, d in values) / len(values)),
            config=snapshot,
        )
        logger.info(
            f"{key}: GCI IDR {reports[key].gci.idr:.2f}%, "
            f"IDA {reports[key].gci.ida:.3f} ms."
        )
    run_dir = _make_dir(config.run_dir)
    logs = {
        name: str(run_dir / f"{name}.csv")
        for name in ("prior_log", "train_log")
        if (run_dir / f"{name}.csv").exists()
    }
    result = ExperimentResult(snapshot, reports, logs)
    result.save(run_dir / "results.json")
    (run_dir / "results.txt").write_text(render_table(reports) + "\n")
    plot_sweep(result, run_dir)
    return result


@flow(name="speech2egg-report")
def cmd_report(result_paths: List[Path], out_dir: Path) -> Path:
    """
    Re-renders tables and plots from saved experiment results. With two or
    more results, also renders the loss comparison on clean speech, one row
    per result labelled by its reconstruction loss.

    Args:
        result_paths: `results.json` files written by `cmd_eval`.
        out_dir: Directory receiving `report.txt` and the plots.

    Returns:
        Path of the written report.
    """
    if not result_paths:
        raise ConfigError("No experiment results to report on.")
    out_dir = _make_dir(Path(out_dir))
    results = [ExperimentResult.load(path) for path in result_paths]
    sections = []
    variants: Dict[str, MetricsReport] = {}
    for index, (path, result) in enumerate(zip(result_paths, results)):
        sections.append(f"{path}\n{render_table(result.reports)}")
        if len(results) == 1:
            plot_sweep(result, out_dir)
        else:
            plot_sweep(result, _make_dir(out_dir / f"result{index}"))
        label = str(result.config.get("loss", Path(path).parent.name))
        if label in variants:
            label = f"{label} ({Path(path).parent.name})"
        if CLEAN in result.reports:
            variants[label] = result.reports[CLEAN]
    if len(variants) > 1:
        table = render_comparison_table(variants)
        sections.append(f"Loss comparison, clean speech\n{table}")
    path = out_dir / "report.txt"
    path.write_text("\n\n".join(sections) + "\n")
    get_run_logger().info(f"Wrote report to {str(path)!r}.")
    return path
