"""Run configuration: a Prefect Block with YAML loading and flag overrides"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from pydantic import VERSION as PYDANTIC_VERSION
from prefect.blocks.core import Block

from prefect_speech2egg.aai import Architecture, TrainSettings
from prefect_speech2egg.exceptions import ConfigError
from prefect_speech2egg.neuralcore import RECONSTRUCTION_LOSSES
from prefect_speech2egg.preprocess import NOISE_KINDS, window_length
from prefect_speech2egg.synthdata import CorpusSpec

if PYDANTIC_VERSION.startswith("2."):
    from pydantic.v1 import BaseModel, Field, ValidationError, validator
else:
    from pydantic import BaseModel, Field, ValidationError, validator

DATA_DIR_ENV = "AAI_DATA_DIR"


def default_data_dir() -> Path:
    """
    Data root: `$AAI_DATA_DIR` when set, `./data` otherwise.
    """
    return Path(os.environ.get(DATA_DIR_ENV) or "data")


class SynthSettings(BaseModel):
    """
    Knobs of the synthetic corpus generator.
    """

    n_utterances: int = Field(default=200, ge=0, description="Utterances to generate.")
    pitch_range: List[float] = Field(
        default=[80.0, 300.0], description="Lowest and highest pitch in Hz."
    )
    cq_range: List[float] = Field(
        default=[0.3, 0.6], description="Range of contact quotients."
    )
    sq_range: List[float] = Field(
        default=[0.7, 2.0], description="Range of speed quotients."
    )
    amplitude_range: List[float] = Field(
        default=[0.85, 1.0], description="Range of cycle amplitudes."
    )
    voiced_segments: List[int] = Field(
        default=[1, 3], description="Fewest and most voiced runs per utterance."
    )
    voiced_duration: List[float] = Field(
        default=[0.25, 0.6], description="Duration range of a voiced run in seconds."
    )
    unvoiced_duration: List[float] = Field(
        default=[0.05, 0.15], description="Duration range of silent gaps in seconds."
    )
    aspiration_std: float = Field(
        default=0.02, ge=0, description="Aspiration noise level in unvoiced gaps."
    )
    split_fractions: List[float] = Field(
        default=[0.8, 0.1, 0.1], description="Train, validation and test shares."
    )
    babble_talkers: int = Field(
        default=6, ge=1, description="Talkers summed into the babble source."
    )
    babble_duration: float = Field(
        default=10.0, gt=0, description="Duration of the babble source in seconds."
    )
    bit_depth: Union[int, str] = Field(
        default="float", description="WAV sample format: 16, 24, 32 or float."
    )

    class Config:
        """Rejects unknown keys."""

        extra = "forbid"

    def to_corpus_spec(self, seed: int, rate: int) -> CorpusSpec:
        """
        The generator's corpus description for a seed and sampling rate.
        """
        return CorpusSpec(
            n_utterances=self.n_utterances,
            seed=seed,
            rate=rate,
            pitch_range=tuple(self.pitch_range),
            cq_range=tuple(self.cq_range),
            sq_range=tuple(self.sq_range),
            amplitude_range=tuple(self.amplitude_range),
            voiced_segments=tuple(self.voiced_segments),
            voiced_duration=tuple(self.voiced_duration),
            unvoiced_duration=tuple(self.unvoiced_duration),
            aspiration_std=self.aspiration_std,
            split_fractions=tuple(self.split_fractions),
            babble_talkers=self.babble_talkers,
            babble_duration=self.babble_duration,
            bit_depth=self.bit_depth,
        )


class NoiseSweep(BaseModel):
    """
    Noise conditions evaluated besides clean speech.
    """

    kinds: List[str] = Field(
        default=["white", "babble"], description="Noise kinds to sweep."
    )
    snrs: List[float] = Field(
        default=[0.0, 5.0, 10.0, 15.0, 20.0], description="SNR ladder in dB."
    )
    babble_path: Optional[Path] = Field(
        default=None,
        description="Babble source; defaults to babble.wav next to the manifest.",
    )

    class Config:
        """Rejects unknown keys."""

        extra = "forbid"

    @validator("kinds", each_item=True)
    def _known_kind(cls, kind):
        """Accepts only the supported noise kinds."""
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        return kind


class RunConfig(Block):
    """
    Configuration of a full speech-to-EGG experiment: corpus synthesis,
    training of the EGG prior and the adversarial model, inference and the
    noise sweep of the evaluation.

    Attributes:
        seed: Base seed of every random draw.
        rate: Sampling rate in Hz.
        window_ms: Window length in milliseconds.
        train_stride: Hop between training windows in samples.
        infer_stride: Hop between inference windows in samples.
        encoder_widths: Hidden widths of the encoders.
        latent_dim: Width of the latent code.
        discriminator_widths: Hidden widths of the discriminator.
        leaky_slope: Negative-side slope of the hidden activations.
        lr: Adam learning rate.
        beta1: Adam first moment decay.
        beta2: Adam second moment decay.
        k_inner: Encoder/decoder steps per discriminator step.
        batch_size: Frames per minibatch.
        lambda_adv: Weight of the adversarial term.
        noise_std: Input noise added to speech windows during training.
        prior_steps: Step budget of the EGG prior.
        aai_steps: Step budget of adversarial training.
        patience: Steps without validation improvement before stopping.
        val_every: Steps between validation passes.
        log_every: Steps between progress log lines.
        loss: Reconstruction term, `cosine` or `l2`.
        silence_floor: EGG peak below which a training window is dropped.
        synth: Corpus generator settings.
        sweep: Noise sweep of the evaluation.
        data_dir: Root for corpora and runs.
        manifest: Corpus manifest; defaults to `<data_dir>/corpus/manifest.csv`.
        out_dir: Run directory; defaults to `<data_dir>/run`.
        checkpoint: Checkpoint file; defaults to `<out_dir>/checkpoint.npz`.

    Examples:
        Load a configured block:
        ```python
        from prefect_speech2egg import RunConfig

        run_config = RunConfig.load("BLOCK_NAME")
        ```

        Read a YAML file and override a few values:
        ```python
        from prefect_speech2egg import RunConfig

        run_config = RunConfig.from_file("run.yaml").with_overrides(seed=7)
        ```
    """

    _block_type_name = "Speech2EGG Run Config"
    _logo_url = "https://cdn.sanity.io/images/3ugk85nk/production/0b47a017e1b40381de770c17647c49cdf6388d1c-250x250.png"  # noqa: E501
    _documentation_url = "https://prefecthq.github.io/prefect-speech2egg/config/#prefect_speech2egg.config.RunConfig"  # noqa: E501

    seed: int = Field(default=0, description="Base seed of every random draw.")
    rate: int = Field(default=16000, gt=0, description="Sampling rate in Hz.")
    window_ms: float = Field(
        default=12.0, gt=0, description="Window length in milliseconds."
    )
    train_stride: int = Field(
        default=16, ge=1, description="Hop between training windows in samples."
    )
    infer_stride: int = Field(
        default=1, ge=1, description="Hop between inference windows in samples."
    )
    encoder_widths: List[int] = Field(
        default=[160, 128, 96, 64, 32], description="Hidden widths of the encoders."
    )
    latent_dim: int = Field(default=16, ge=1, description="Width of the latent code.")
    discriminator_widths: List[int] = Field(
        default=[32, 16], description="Hidden widths of the discriminator."
    )
    leaky_slope: float = Field(
        default=0.01, ge=0, description="Negative-side slope of hidden activations."
    )
    lr: float = Field(default=2e-4, gt=0, description="Adam learning rate.")
    beta1: float = Field(default=0.5, description="Adam first moment decay.")
    beta2: float = Field(default=0.999, description="Adam second moment decay.")
    k_inner: int = Field(
        default=2, ge=1, description="Encoder/decoder steps per discriminator step."
    )
    batch_size: int = Field(default=256, ge=2, description="Frames per minibatch.")
    lambda_adv: float = Field(
        default=1.0, ge=0, description="Weight of the adversarial term."
    )
    noise_std: float = Field(
        default=0.01, ge=0, description="Input noise added to speech windows."
    )
    prior_steps: int = Field(
        default=5000, ge=0, description="Step budget of the EGG prior."
    )
    aai_steps: int = Field(
        default=20000, ge=0, description="Step budget of adversarial training."
    )
    patience: int = Field(
        default=2000, ge=1, description="Steps without improvement before stopping."
    )
    val_every: int = Field(
        default=500, ge=1, description="Steps between validation passes."
    )
    log_every: int = Field(
        default=100, ge=1, description="Steps between progress log lines."
    )
    loss: str = Field(default="cosine", description="Reconstruction term.")
    silence_floor: float = Field(
        default=1e-3, ge=0, description="EGG peak below which a window is dropped."
    )
    synth: SynthSettings = Field(
        default_factory=SynthSettings, description="Corpus generator settings."
    )
    sweep: NoiseSweep = Field(
        default_factory=NoiseSweep, description="Noise sweep of the evaluation."
    )
    data_dir: Path = Field(
        default_factory=default_data_dir, description="Root for corpora and runs."
    )
    manifest: Optional[Path] = Field(
        default=None, description="Corpus manifest CSV file."
    )
    out_dir: Optional[Path] = Field(
        default=None, description="Directory receiving run artifacts."
    )
    checkpoint: Optional[Path] = Field(default=None, description="Checkpoint file.")

    @validator("loss")
    def _known_loss(cls, loss):
        """Accepts only the supported reconstruction losses."""
        if loss not in RECONSTRUCTION_LOSSES:
            raise ValueError(
                f"unknown loss {loss!r}; choose one of {sorted(RECONSTRUCTION_LOSSES)}"
            )
        return loss

    @validator("encoder_widths", "discriminator_widths")
    def _positive_widths(cls, widths):
        """Requires every hidden width to be at least one."""
        if any(width < 1 for width in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        return widths

    @validator("beta1", "beta2")
    def _decay(cls, beta):
        """Keeps Adam decay rates in [0, 1)."""
        if not 0 <= beta < 1:
            raise ValueError(f"Adam decay must lie in [0, 1), got {beta}")
        return beta

    @property
    def window_len(self) -> int:
        """Samples per analysis window at the configured rate."""
        return window_length(self.rate, self.window_ms)

    @property
    def manifest_path(self) -> Path:
        """The manifest file, under the data directory by default."""
        return self.manifest or self.data_dir / "corpus" / "manifest.csv"

    @property
    def run_dir(self) -> Path:
        """The directory receiving logs, checkpoints and results."""
        return self.out_dir or self.data_dir / "run"

    @property
    def checkpoint_path(self) -> Path:
        """The checkpoint file, inside the run directory by default."""
        return self.checkpoint or self.run_dir / "checkpoint.npz"

    @property
    def babble_path(self) -> Path:
        """The babble source, next to the manifest by default."""
        return self.sweep.babble_path or self.manifest_path.parent / "babble.wav"

    def architecture(self) -> Architecture:
        """
        Network widths for this configuration.
        """
        return Architecture(
            window_len=self.window_len,
            encoder_widths=tuple(self.encoder_widths),
            latent_dim=self.latent_dim,
            discriminator_widths=tuple(self.discriminator_widths),
            leaky_slope=self.leaky_slope,
        )

    def _train_settings(self, steps: int, loss: Optional[str] = None) -> TrainSettings:
        """Training settings shared by both stages."""
        return TrainSettings(
            steps=steps,
            batch_size=self.batch_size,
            k_inner=self.k_inner,
            lambda_adv=self.lambda_adv,
            noise_std=self.noise_std,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            loss=loss or self.loss,
            patience=self.patience,
            val_every=self.val_every,
            log_every=self.log_every,
            seed=self.seed,
        )

    def prior_settings(self) -> TrainSettings:
        """
        Settings of the EGG prior; it always trains with the cosine term.
        """
        return self._train_settings(self.prior_steps, loss="cosine")

    def aai_settings(self) -> TrainSettings:
        """
        Settings of adversarial training.
        """
        return self._train_settings(self.aai_steps)

    def corpus_spec(self) -> CorpusSpec:
        """The synthetic corpus description for this configuration."""
        return self.synth.to_corpus_spec(self.seed, self.rate)

    def snapshot(self) -> Dict[str, Any]:
        """
        JSON-safe dict of every field, embedded in run artifacts.
        """
        return json.loads(self.json(exclude={"block_type_slug"}))

    @classmethod
    def _validate(cls, values: Dict[str, Any], origin: str) -> "RunConfig":
        """Builds a configuration from a mapping, raising ConfigError on bad values."""
        if not isinstance(values, dict):
            raise ConfigError(f"{origin} must hold a mapping of settings.")
        unknown = sorted(set(values) - set(cls.__fields__) - {"block_type_slug"})
        if unknown:
            raise ConfigError(f"Unknown settings in {origin}: {', '.join(unknown)}.")
        values = {k: v for k, v in values.items() if k != "block_type_slug"}
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigError(f"Invalid settings in {origin}: {exc}") from exc

    @classmethod
    def from_snapshot(cls, snapshot: Dict[str, Any]) -> "RunConfig":
        """
        Rebuilds the configuration embedded in an artifact.
        """
        return cls._validate(dict(snapshot), "the configuration snapshot")

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> "RunConfig":
        """
        Reads a YAML configuration; omitted settings keep their defaults.

        Raises:
            ConfigError: The file is missing, is not YAML, or holds unknown or
                invalid settings.
        """
        try:
            with open(path) as handle:
                values = yaml.safe_load(handle)
        except OSError as exc:
            raise ConfigError(
                f"Cannot read configuration {str(path)!r}: {exc}"
            ) from exc
        except yaml.YAMLError as exc:
            raise ConfigError(
                f"Configuration {str(path)!r} is not YAML: {exc}"
            ) from exc
        return cls._validate(values or {}, repr(str(path)))

    def with_overrides(self, **flags: Any) -> "RunConfig":
        """
        A copy with the given settings replaced; `None` means not given.
        Nested settings are addressed as `synth__n_utterances`.

        Example:
            ```python
            config = RunConfig().with_overrides(seed=7, synth__n_utterances=20)
            ```
        """
        values = self.snapshot()
        for key, value in flags.items():
            if value is None:
                continue
            group, _, name = key.partition("__")
            if name:
                if not isinstance(values.get(group), dict):
                    raise ConfigError(f"Unknown setting group {group!r}.")
                values[group][name] = value
            else:
                values[key] = value
        return self._validate(values, "the overrides")
