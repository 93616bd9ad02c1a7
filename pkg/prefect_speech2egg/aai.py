"""EGG autoencoder prior, adversarial approximate inference training and inference"""

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd

from prefect_speech2egg.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    ProvenanceError,
)
from prefect_speech2egg.neuralcore import (
    RECONSTRUCTION_LOSSES,
    Checkpoint,
    DenseNet,
    LossValue,
    TrainState,
    adversarial_losses,
    cosine_distances,
    discriminator_loss_grads,
    generator_loss_grad,
    optimizer_step,
)
from prefect_speech2egg.preprocess import FrameDataset, augment_input
from prefect_speech2egg.signal_io import Waveform
from prefect_speech2egg.utilities import derive_seed, get_logger

LatentSource = Literal["egg_prior", "speech_encoder"]
LOG_COLUMNS = ["step", "recon", "gen", "disc", "val_cosine"]
# Norm floor for predicted windows during training only.
TRAIN_NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class Architecture:
    """
    Layer widths shared by the four networks.

    Attributes:
        window_len: Samples per window, the input of both encoders.
        encoder_widths: Hidden widths of the encoders; decoders mirror them.
        latent_dim: Width of the latent code.
        discriminator_widths: Hidden widths of the discriminator.
        leaky_slope: Negative-side slope of the hidden activations.
    """

    window_len: int = 192
    encoder_widths: Tuple[int, ...] = (160, 128, 96, 64, 32)
    latent_dim: int = 16
    discriminator_widths: Tuple[int, ...] = (32, 16)
    leaky_slope: float = 0.01

    def __post_init__(self):
        """Rejects non-positive widths."""
        widths = (self.window_len, self.latent_dim) + tuple(self.encoder_widths)
        if min(widths + tuple(self.discriminator_widths)) < 1:
            raise ConfigError(f"Network widths must be positive: {self}.")

    def encoder(self, seed: int, name: str) -> DenseNet:
        """A speech or EGG encoder from the window to the latent width."""
        return DenseNet.build(
            [self.window_len, *self.encoder_widths, self.latent_dim],
            leaky_slope=self.leaky_slope,
            seed=seed,
            name=name,
        )

    def decoder(self, seed: int, name: str) -> DenseNet:
        """An EGG decoder mirroring the encoder widths."""
        return DenseNet.build(
            [self.latent_dim, *reversed(self.encoder_widths), self.window_len],
            leaky_slope=self.leaky_slope,
            seed=seed,
            name=name,
        )

    def discriminator(self, seed: int, name: str = "disc") -> DenseNet:
        """The latent discriminator, ending in a sigmoid probability."""
        return DenseNet.build(
            [self.latent_dim, *self.discriminator_widths, 1],
            output_activation="sigmoid",
            batch_norm=False,
            leaky_slope=self.leaky_slope,
            seed=seed,
            name=name,
        )


@dataclass(frozen=True)
class TrainSettings:
    """
    Knobs of one training stage.

    Attributes:
        steps: Total step budget, counted across resumes.
        batch_size: Frames per minibatch.
        k_inner: Encoder/decoder updates per discriminator update.
        lambda_adv: Weight of the adversarial term.
        noise_std: Standard deviation of the input noise added to speech windows.
        lr: Adam learning rate.
        beta1: Adam first moment decay.
        beta2: Adam second moment decay.
        loss: Reconstruction term, `"cosine"` or `"l2"`.
        patience: Steps without validation improvement before stopping early.
        val_every: Steps between validation passes.
        log_every: Steps between progress log lines.
        seed: Base seed of the stage.
        saturation_floor: Discriminator loss below which it counts as saturated.
        saturation_window: Consecutive saturated steps that trigger a warning.
        max_val_frames: Validation frames used per pass.
    """

    steps: int = 20000
    batch_size: int = 256
    k_inner: int = 2
    lambda_adv: float = 1.0
    noise_std: float = 0.01
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    loss: str = "cosine"
    patience: int = 2000
    val_every: int = 500
    log_every: int = 100
    seed: int = 0
    saturation_floor: float = 1e-5
    saturation_window: int = 500
    max_val_frames: int = 4096

    def __post_init__(self):
        """Rejects settings the training loops cannot run with."""
        if self.steps < 0:
            raise ConfigError(f"Step budget cannot be negative; got {self.steps}.")
        if self.batch_size < 2:
            raise ConfigError("Batch normalization needs a batch size of at least 2.")
        if self.k_inner < 1:
            raise ConfigError(f"k_inner must be at least 1; got {self.k_inner}.")
        if self.lambda_adv < 0 or self.noise_std < 0:
            raise ConfigError("lambda_adv and noise_std must be non-negative.")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam needs lr > 0 and betas in [0, 1).")
        if self.loss not in RECONSTRUCTION_LOSSES:
            raise ConfigError(
                f"Unknown reconstruction loss {self.loss!r}; "
                f"choose one of {sorted(RECONSTRUCTION_LOSSES)}."
            )
        if min(self.patience, self.val_every, self.log_every) < 1:
            raise ConfigError("patience, val_every and log_every must be positive.")


@dataclass
class PriorModel:
    """
    The EGG autoencoder whose encoder images of real EGG frames serve as the
    latent prior.

    Attributes:
        egg_encoder: Maps EGG windows to latents.
        egg_decoder: Maps latents back to EGG windows.
    """

    egg_encoder: DenseNet
    egg_decoder: DenseNet

    def __post_init__(self):
        """Checks that the encoder and decoder agree on the latent width."""
        if self.egg_encoder.out_dim != self.egg_decoder.in_dim:
            raise ValueError(
                f"Encoder emits {self.egg_encoder.out_dim} latents but the decoder "
                f"expects {self.egg_decoder.in_dim}."
            )

    @property
    def latent_dim(self) -> int:
        """Width of the latent code."""
        return self.egg_encoder.out_dim

    @property
    def window_len(self) -> int:
        """Samples per EGG window."""
        return self.egg_encoder.in_dim

    def reconstruct(self, egg_windows: np.ndarray) -> np.ndarray:
        """Encodes and decodes EGG windows in eval mode."""
        return self.egg_decoder.forward(self.egg_encoder.forward(egg_windows))


@dataclass
class AAIModel:
    """
    The speech-to-EGG model.

    Attributes:
        speech_encoder: Maps speech windows to latents.
        egg_decoder: Maps latents to EGG windows; starts as the prior's decoder.
        discriminator: Scores latents as prior (1) or speech-encoded (0).
    """

    speech_encoder: DenseNet
    egg_decoder: DenseNet
    discriminator: DenseNet

    def __post_init__(self):
        """Checks that all three networks agree on the latent width."""
        latent = self.speech_encoder.out_dim
        if self.egg_decoder.in_dim != latent or self.discriminator.in_dim != latent:
            raise ValueError(
                "Speech encoder, decoder and discriminator disagree on latents."
            )

    @property
    def window_len(self) -> int:
        """Samples per speech window."""
        return self.speech_encoder.in_dim

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """
        Maps speech windows to EGG windows in eval mode.
        """
        return self.egg_decoder.forward(self.speech_encoder.forward(windows))


class WindowModel(Protocol):
    """Anything mapping speech windows to EGG windows of a fixed length."""

    window_len: int

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Maps a batch of speech windows to EGG windows of the same width."""
        ...


@dataclass(frozen=True)
class TrainRecord:
    """Losses of one encoder/decoder step; NaN where a value was not computed."""

    step: int
    recon: float
    gen: float
    disc: float
    val_cosine: float = math.nan
    disc_update: bool = False


@dataclass
class TrainLog:
    """
    Per-step training losses.

    Attributes:
        records: One record per encoder/decoder step, steps strictly increasing.
    """

    records: List[TrainRecord] = field(default_factory=list)

    def __len__(self) -> int:
        """Number of recorded steps."""
        return len(self.records)

    def append(self, record: TrainRecord):
        """Adds a record; its step must follow the last recorded step."""
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"Step {record.step} does not follow step {self.records[-1].step}."
            )
        self.records.append(record)

    def extend(self, other: "TrainLog"):
        """Appends every record of `other`, e.g. after resuming."""
        for record in other.records:
            self.append(record)

    def discriminator_steps(self) -> List[int]:
        """
        Steps after which the discriminator was updated.
        """
        return [record.step for record in self.records if record.disc_update]

    def inner_steps_per_update(self) -> List[int]:
        """
        Number of encoder/decoder steps between consecutive discriminator updates.
        """
        counts, current = [], 0
        for record in self.records:
            current += 1
            if record.disc_update:
                counts.append(current)
                current = 0
        return counts

    @property
    def last_val_cosine(self) -> float:
        """The most recent validation cosine distance, NaN before the first pass."""
        values = [r.val_cosine for r in self.records if not math.isnan(r.val_cosine)]
        return values[-1] if values else math.nan

    @property
    def best_val_cosine(self) -> float:
        """The lowest validation cosine distance, NaN before the first pass."""
        values = [r.val_cosine for r in self.records if not math.isnan(r.val_cosine)]
        return min(values) if values else math.nan

    def to_frame(self) -> pd.DataFrame:
        """The log as a frame with the CSV columns."""
        return pd.DataFrame(
            [[getattr(r, column) for column in LOG_COLUMNS] for r in self.records],
            columns=LOG_COLUMNS,
        ).astype({"step": "int64"})

    def to_csv(self, path: Union[str, os.PathLike]) -> Path:
        """
        Writes `step,recon,gen,disc,val_cosine`; missing validation values are
        left empty.
        """
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False, na_rep="", lineterminator="\n")
        except OSError as exc:
            raise DataError(f"Cannot write training log {str(path)!r}: {exc}") from exc
        return path

    @classmethod
    def from_csv(
        cls, path: Union[str, os.PathLike], k_inner: Optional[int] = None
    ) -> "TrainLog":
        """
        Reads a log written by `to_csv`. Discriminator updates are not stored in
        the file; given `k_inner` they are restored as every k-th step.
        """
        try:
            table = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataError(f"Cannot read training log {str(path)!r}: {exc}") from exc
        if list(table.columns) != LOG_COLUMNS:
            raise DataError(
                f"Training log {str(path)!r} has columns {list(table.columns)}."
            )
        log = cls()
        for row in table.itertuples(index=False):
            step = int(row.step)
            log.append(
                TrainRecord(
                    step=step,
                    recon=float(row.recon),
                    gen=float(row.gen),
                    disc=float(row.disc),
                    val_cosine=float(row.val_cosine),
                    disc_update=bool(k_inner) and step % k_inner == 0,
                )
            )
        return log


@dataclass(frozen=True)
class LatentBatch:
    """
    Latent codes tagged with where they came from.

    Attributes:
        values: Matrix of shape (B, latent_dim).
        source: `"egg_prior"` for prior samples, `"speech_encoder"` for
            speech-encoder outputs.
    """

    values: np.ndarray
    source: LatentSource


def sample_prior(prior: PriorModel, egg_batch: np.ndarray) -> LatentBatch:
    """
    Draws prior latents by pushing real EGG frames through the EGG encoder
    in eval mode.

    Args:
        prior: The trained EGG autoencoder.
        egg_batch: EGG windows, shape (B, W).

    Returns:
        The latents, shape (B, latent_dim), tagged as prior samples.
    """
    egg_batch = np.asarray(egg_batch, dtype=np.float64)
    if egg_batch.ndim != 2 or egg_batch.shape[1] != prior.window_len:
        raise ValueError(
            f"Prior expects EGG windows of width {prior.window_len}; "
            f"got shape {egg_batch.shape}."
        )
    return LatentBatch(prior.egg_encoder.forward(egg_batch, mode="eval"), "egg_prior")


def _validation_batch(
    dataset: Optional[FrameDataset], limit: int, seed: int
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """All validation frames, or a seeded sample of `limit` of them."""
    if dataset is None or not len(dataset):
        return None
    if len(dataset) <= limit:
        return dataset.batch(np.arange(len(dataset)))
    rng = np.random.default_rng(derive_seed(seed, "validation"))
    return dataset.batch(np.sort(rng.choice(len(dataset), size=limit, replace=False)))


def validation_cosine(predict, speech: np.ndarray, egg: np.ndarray) -> float:
    """
    Mean cosine distance between predicted and reference EGG windows, over
    the windows whose reference is not silent.
    """
    distances = _guarded_cosine(predict(speech), egg)
    return float(np.nanmean(distances)) if np.any(~np.isnan(distances)) else math.nan


def _check_dataset(dataset: FrameDataset, window_len: int):
    """Rejects an empty dataset or one framed at another window length."""
    if not len(dataset):
        raise DataError("Cannot train on an empty frame dataset.")
    if dataset.window_len != window_len:
        raise DataError(
            f"Frames hold {dataset.window_len} samples but the networks expect "
            f"{window_len}."
        )


def _finite_or_raise(step: int, **losses: float):
    """Raises DivergenceError when any named loss is NaN or infinite."""
    for name, value in losses.items():
        if not math.isfinite(value):
            raise DivergenceError(
                f"{name} loss became {value} at step {step}.", last_finite_step=step - 1
            )


class _EarlyStopping:
    """Tracks the best validation value and a copy of the state that reached it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_step = 0
        self.snapshot: Optional[TrainState] = None

    def update(self, step: int, value: float, state: TrainState) -> bool:
        """Records `value`; true once `patience` steps passed without improving."""
        if value < self.best:
            self.best, self.best_step = value, step
            self.snapshot = state.copy()
        return step - self.best_step >= self.patience


def train_prior(
    dataset: FrameDataset,
    settings: TrainSettings = TrainSettings(steps=5000),
    architecture: Optional[Architecture] = None,
    val_dataset: Optional[FrameDataset] = None,
) -> Tuple[PriorModel, TrainLog]:
    """
    Trains the EGG autoencoder on the EGG windows of `dataset`.

    Args:
        dataset: Training frames; only the EGG windows are used.
        settings: Step budget, optimizer and loss settings.
        architecture: Network widths; the window length follows the dataset.
        val_dataset: Frames whose mean reconstruction cosine distance is
            tracked for early stopping.

    Returns:
        The trained prior and its training log.
    """
    logger = get_logger(__name__)
    architecture = architecture or Architecture(window_len=dataset.window_len)
    _check_dataset(dataset, architecture.window_len)
    prior = PriorModel(
        egg_encoder=architecture.encoder(
            derive_seed(settings.seed, "egg_enc"), "egg_enc"
        ),
        egg_decoder=architecture.decoder(
            derive_seed(settings.seed, "egg_dec"), "egg_dec"
        ),
    )
    nets = {"egg_enc": prior.egg_encoder, "egg_dec": prior.egg_decoder}
    state = TrainState(nets=nets)
    loss_fn, loss_grad = RECONSTRUCTION_LOSSES[settings.loss]
    val_batch = _validation_batch(val_dataset, settings.max_val_frames, settings.seed)
    stopper = _EarlyStopping(settings.patience)
    stopped_early = False
    log = TrainLog()

    logger.info(
        f"Training the EGG prior on {len(dataset)} frames for {settings.steps} steps "
        f"({settings.loss} reconstruction)."
    )
    for step in range(1, settings.steps + 1):
        rng = np.random.default_rng(derive_seed(settings.seed, "prior_step", step))
        y = dataset.egg_windows(rng.integers(len(dataset), size=settings.batch_size))
        z = prior.egg_encoder.forward(y, mode="train")
        y_hat = prior.egg_decoder.forward(z, mode="train")
        recon = _reconstruction(loss_fn, y_hat, y, settings.loss)
        _finite_or_raise(step, reconstruction=recon)

        decoder_grads, grad_z = prior.egg_decoder.backward(
            _reconstruction_grad(loss_grad, y_hat, y, settings.loss)
        )
        encoder_grads, _ = prior.egg_encoder.backward(grad_z)
        optimizer_step(
            state,
            {**encoder_grads, **decoder_grads},
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
        )

        val = math.nan
        if val_batch is not None and (
            step % settings.val_every == 0 or step == settings.steps
        ):
            val = validation_cosine(prior.reconstruct, val_batch[1], val_batch[1])
        log.append(
            TrainRecord(step=step, recon=recon, gen=0.0, disc=0.0, val_cosine=val)
        )
        if step % settings.log_every == 0:
            logger.debug(f"Prior step {step}: recon {recon:.4f}, val {val:.4f}.")
        if not math.isnan(val) and stopper.update(step, val, state):
            logger.warning(
                f"Prior validation has not improved for {settings.patience} steps; "
                f"stopping early at step {step}."
            )
            stopped_early = True
            break

    if stopped_early and stopper.snapshot is not None:
        best = stopper.snapshot.nets
        prior = PriorModel(best["egg_enc"], best["egg_dec"])
    logger.info(
        f"Prior training finished after {len(log)} steps; "
        f"best validation cosine distance {log.best_val_cosine:.4f}."
    )
    return prior, log


def _reconstruction(loss_fn, y_hat, y, loss: str) -> float:
    """The batch reconstruction loss, leaving out silent targets for cosine."""
    if loss == "cosine":
        distances = _guarded_cosine(y_hat, y)
        return float(np.nanmean(distances)) if np.any(~np.isnan(distances)) else 0.0
    return loss_fn(y_hat, y).scalar


def _reconstruction_grad(loss_grad, y_hat, y, loss: str) -> np.ndarray:
    """Gradient of the reconstruction loss, zero for silent cosine targets."""
    if loss != "cosine":
        return loss_grad(y_hat, y)
    # Silent targets carry no direction; they contribute nothing.
    live = np.linalg.norm(y, axis=1) > 0
    grad = np.zeros_like(y_hat)
    if not np.any(live):
        return grad
    # A prediction with vanishing norm takes the all-ones direction.
    norms = np.linalg.norm(y_hat, axis=1, keepdims=True)
    nudge = np.full_like(y_hat, TRAIN_NORM_FLOOR / math.sqrt(y_hat.shape[1]))
    y_hat = np.where(norms < TRAIN_NORM_FLOOR, nudge, y_hat)
    grad[live] = loss_grad(y_hat[live], y[live]) * (live.sum() / len(live))
    return grad


def _guarded_cosine(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise cosine distances, NaN where the target is silent."""
    # NaN for silent targets, a right angle for vanishing predictions.
    distances = np.full(y_hat.shape[0], math.nan)
    targets = np.linalg.norm(y, axis=1) > 0
    distances[targets] = 0.5 * math.pi
    live = targets & (np.linalg.norm(y_hat, axis=1) >= TRAIN_NORM_FLOOR)
    if np.any(live):
        distances[live] = cosine_distances(y_hat[live], y[live])
    return distances


def discriminator_update(
    disc: DenseNet,
    state: TrainState,
    real: LatentBatch,
    fake: LatentBatch,
    settings: TrainSettings,
) -> float:
    """
    One discriminator update with prior latents as real and speech-encoder
    latents as fake.

    Raises:
        ProvenanceError: A batch came from the wrong source.
    """
    if real.source != "egg_prior":
        raise ProvenanceError(
            f"Real latents must come from the EGG prior, not {real.source}."
        )
    if fake.source != "speech_encoder":
        raise ProvenanceError(
            f"Fake latents must come from the speech encoder, not {fake.source}."
        )
    both = disc.forward(np.vstack([real.values, fake.values]), mode="train")
    d_real, d_fake = both[: len(real.values)], both[len(real.values) :]
    _, disc_loss = adversarial_losses(d_real, d_fake)
    grad_real, grad_fake = discriminator_loss_grads(d_real, d_fake)
    grads, _ = disc.backward(np.vstack([grad_real, grad_fake]))
    # Only encoder/decoder updates advance the step counter.
    optimizer_step(
        state,
        grads,
        lr=settings.lr,
        beta1=settings.beta1,
        beta2=settings.beta2,
        advance=False,
    )
    return disc_loss


def train_aai(
    dataset: FrameDataset,
    prior: PriorModel,
    settings: TrainSettings = TrainSettings(),
    architecture: Optional[Architecture] = None,
    val_dataset: Optional[FrameDataset] = None,
    resume: Optional[Checkpoint] = None,
) -> Tuple[AAIModel, TrainLog, TrainState]:
    """
    Adversarial approximate inference. Every step updates the speech encoder
    and the decoder on noise-augmented speech with the reconstruction term plus
    the weighted adversarial term; after every `k_inner` such steps the
    discriminator takes one step on fresh prior latents (real) against fresh
    speech-encoder latents (fake).

    Args:
        dataset: Paired training frames.
        prior: The trained EGG autoencoder.
        settings: Step budget, loop and optimizer settings.
        architecture: Network widths; the window length follows the dataset.
        val_dataset: Frames for the validation cosine distance and early stopping.
        resume: A checkpoint of an interrupted run to continue from.

    Returns:
        The model, the log of the steps run by this call and the training
        state (encoder, decoder and discriminator moments). After an early stop
        the model and the state, step counter included, are those of the best
        validation step.
    """
    logger = get_logger(__name__)
    architecture = architecture or Architecture(
        window_len=dataset.window_len, latent_dim=prior.latent_dim
    )
    _check_dataset(dataset, architecture.window_len)
    if prior.latent_dim != architecture.latent_dim:
        raise ConfigError(
            f"The prior has {prior.latent_dim} latents; the architecture asks for "
            f"{architecture.latent_dim}."
        )

    if resume is not None:
        missing = {"speech_enc", "dec", "disc"} - set(resume.nets)
        if missing:
            raise CheckpointError(f"Cannot resume: checkpoint lacks {sorted(missing)}.")
        state = resume.train_state(["speech_enc", "dec", "disc"])
        start = resume.step
        logger.info(f"Resuming adversarial training at step {start + 1}.")
    else:
        state = TrainState(
            nets={
                "speech_enc": architecture.encoder(
                    derive_seed(settings.seed, "speech_enc"), "speech_enc"
                ),
                "dec": prior.egg_decoder.copy(name="dec"),
                "disc": architecture.discriminator(derive_seed(settings.seed, "disc")),
            }
        )
        start = 0
    encoder, decoder = state.nets["speech_enc"], state.nets["dec"]
    disc = state.nets["disc"]
    model = AAIModel(encoder, decoder, disc)

    loss_fn, loss_grad = RECONSTRUCTION_LOSSES[settings.loss]
    val_batch = _validation_batch(val_dataset, settings.max_val_frames, settings.seed)
    stopper = _EarlyStopping(settings.patience)
    stopper.best_step = start
    log = TrainLog()
    disc_loss = math.nan
    saturated_for, warned = 0, False
    stopped_early = False

    logger.info(
        f"Adversarial training on {len(dataset)} frames up to step {settings.steps} "
        f"(K={settings.k_inner}, B={settings.batch_size}, "
        f"lambda_adv={settings.lambda_adv}, {settings.loss} reconstruction)."
    )
    for step in range(start + 1, settings.steps + 1):
        rng = np.random.default_rng(derive_seed(settings.seed, "aai_step", step))
        x, y = dataset.batch(rng.integers(len(dataset), size=settings.batch_size))
        z_q = encoder.forward(augment_input(x, settings.noise_std, rng), mode="train")
        y_hat = decoder.forward(z_q, mode="train")
        recon = _reconstruction(loss_fn, y_hat, y, settings.loss)
        d_fake = disc.forward(z_q, mode="eval")
        gen_loss, _ = adversarial_losses(np.full_like(d_fake, 0.5), d_fake)
        _finite_or_raise(step, reconstruction=recon, generator=gen_loss)

        decoder_grads, grad_z = decoder.backward(
            _reconstruction_grad(loss_grad, y_hat, y, settings.loss)
        )
        if settings.lambda_adv > 0:
            _, grad_z_adv = disc.backward(
                settings.lambda_adv * generator_loss_grad(d_fake)
            )
            grad_z = grad_z + grad_z_adv
        encoder_grads, _ = encoder.backward(grad_z)
        optimizer_step(
            state,
            {**encoder_grads, **decoder_grads},
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
        )
        disc_update = step % settings.k_inner == 0
        if disc_update:
            draw = rng.integers(len(dataset), size=settings.batch_size)
            real = sample_prior(prior, dataset.egg_windows(draw))
            speech = dataset.speech_windows(
                rng.integers(len(dataset), size=settings.batch_size)
            )
            fake = LatentBatch(
                encoder.forward(
                    augment_input(speech, settings.noise_std, rng),
                    mode="train",
                    update_stats=False,
                ),
                "speech_encoder",
            )
            disc_loss = discriminator_update(disc, state, real, fake, settings)
            _finite_or_raise(step, discriminator=disc_loss)

        saturated = disc_loss < settings.saturation_floor
        saturated_for = saturated_for + 1 if saturated else 0
        if saturated_for >= settings.saturation_window and not warned:
            logger.warning(
                f"Discriminator loss below {settings.saturation_floor:g} for "
                f"{settings.saturation_window} consecutive steps (step {step})."
            )
            warned = True

        val = math.nan
        if val_batch is not None and (
            step % settings.val_every == 0 or step == settings.steps
        ):
            val = validation_cosine(model.predict, *val_batch)
        log.append(
            TrainRecord(
                step=step,
                recon=recon,
                gen=gen_loss,
                disc=disc_loss,
                val_cosine=val,
                disc_update=disc_update,
            )
        )
        if step % settings.log_every == 0:
            logger.debug(
                f"AAI step {step}: recon {recon:.4f}, gen {gen_loss:.4f}, "
                f"disc {disc_loss:.4f}, val {val:.4f}."
            )
        if not math.isnan(val) and stopper.update(step, val, state):
            logger.warning(
                f"Validation has not improved for {settings.patience} steps; "
                f"stopping early at step {step}."
            )
            stopped_early = True
            break

    if stopped_early and stopper.snapshot is not None:
        state = stopper.snapshot
        best = state.nets
        model = AAIModel(best["speech_enc"], best["dec"], best["disc"])
    logger.info(
        f"Adversarial training kept step {state.step}; best validation cosine "
        f"distance {log.best_val_cosine:.4f}."
    )
    return model, log, state


def infer(
    model: WindowModel, speech: Waveform, stride: int = 1, batch_size: int = 4096
) -> Waveform:
    """
    Estimates the EGG of an utterance: windows taken every `stride` samples
    (plus one window flush with the end) are mapped through the model, and
    each output sample is the mean of all window predictions covering it.

    Args:
        model: Anything with `window_len` and a window-level `predict`.
        speech: The speech waveform.
        stride: Hop between windows; 1 covers every alignment.
        batch_size: Windows per model call.

    Returns:
        The estimated EGG, same length and rate as `speech`.
    """
    width = model.window_len
    n = len(speech)
    if n < width:
        raise DataError(
            f"utterance too short: {n} samples, fewer than one {width}-sample window."
        )
    if stride < 1:
        raise ConfigError(f"Inference stride must be at least 1; got {stride}.")
    starts = np.arange(0, n - width + 1, stride)
    if starts[-1] != n - width:
        starts = np.append(starts, n - width)
    taps = np.arange(width)
    estimate = np.zeros(n)
    counts = np.zeros(n)
    for chunk in np.array_split(starts, max(1, math.ceil(len(starts) / batch_size))):
        predictions = model.predict(speech.samples[chunk[:, None] + taps])
        for tap in range(width):
            positions = chunk + tap
            counts[positions] += 1
            # Running mean keeps identical predictions exact.
            estimate[positions] += (
                predictions[:, tap] - estimate[positions]
            ) / counts[positions]
    return Waveform(samples=estimate, rate=speech.rate, channel_role="egg")


def elbo_report(
    model: AAIModel,
    prior: PriorModel,
    speech_batch: np.ndarray,
    egg_batch: np.ndarray,
    lambda_adv: float = 1.0,
    loss: str = "cosine",
) -> LossValue:
    """
    Surrogate evidence lower bound: minus the reconstruction loss minus
    `lambda_adv` times the discriminator-based estimate of the divergence
    between speech-encoder latents and the prior. It tracks training progress;
    it is not the exact divergence. Silent target windows are left out of the
    cosine reconstruction term.

    Returns:
        The surrogate with components `reconstruction`, `adversarial` and `elbo`.
    """
    if prior.latent_dim != model.speech_encoder.out_dim:
        raise ValueError("The model and the prior disagree on the latent width.")
    loss_fn, _ = RECONSTRUCTION_LOSSES[loss]
    recon = _reconstruction(loss_fn, model.predict(speech_batch), egg_batch, loss)
    d_fake = model.discriminator.forward(model.speech_encoder.forward(speech_batch))
    adversarial, _ = adversarial_losses(np.full_like(d_fake, 0.5), d_fake)
    value = -recon - lambda_adv * adversarial
    return LossValue(
        scalar=value,
        components={"reconstruction": recon, "adversarial": adversarial, "elbo": value},
    )


def to_checkpoint(
    prior: PriorModel,
    model: Optional[AAIModel] = None,
    state: Optional[TrainState] = None,
    config: Optional[Dict] = None,
    stage: str = "aai",
) -> Checkpoint:
    """
    Packs the prior, the model and the optimizer state into a checkpoint.
    """
    nets = {"egg_enc": prior.egg_encoder, "egg_dec": prior.egg_decoder}
    if model is not None:
        nets.update(
            speech_enc=model.speech_encoder.copy(name="speech_enc"),
            dec=model.egg_decoder.copy(name="dec"),
            disc=model.discriminator.copy(name="disc"),
        )
    return Checkpoint(
        nets=nets,
        moments=dict(state.moments) if state else {},
        counts=dict(state.counts) if state else {},
        step=state.step if state else 0,
        config=config or {},
        meta={"stage": stage},
    )


def from_checkpoint(checkpoint: Checkpoint) -> Tuple[PriorModel, Optional[AAIModel]]:
    """
    Unpacks the prior and, when present, the model from a checkpoint.
    """
    try:
        prior = PriorModel(checkpoint.nets["egg_enc"], checkpoint.nets["egg_dec"])
    except KeyError as exc:
        raise CheckpointError(f"Checkpoint lacks the prior network {exc}.") from exc
    names = ("speech_enc", "dec", "disc")
    if not all(name in checkpoint.nets for name in names):
        return prior, None
    return prior, AAIModel(*(checkpoint.nets[name] for name in names))
