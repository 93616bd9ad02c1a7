"""Framing, noise injection and polarity normalization of paired waveforms"""

import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import skew

from prefect_speech2egg.exceptions import ConfigError, DataError
from prefect_speech2egg.signal_io import UtterancePair, Waveform
from prefect_speech2egg.utilities import get_logger

NoiseKind = Literal["white", "babble"]
NOISE_KINDS = ("white", "babble")
SeedLike = Union[int, np.random.Generator, None]

POLARITY_DEAD_ZONE = 0.05


def window_length(rate: int, window_ms: float) -> int:
    """
    Number of samples in a window of `window_ms` milliseconds, rounded half up.
    """
    return int(math.floor(window_ms * rate / 1000.0 + 0.5))


@dataclass(frozen=True)
class FramePair:
    """
    One time-aligned training pair.

    Attributes:
        speech_window: W speech samples.
        egg_window: The W EGG samples starting at the same index.
        origin: The utterance id and start sample index.
    """

    speech_window: np.ndarray
    egg_window: np.ndarray
    origin: Tuple[str, int]


class FrameDataset:
    """
    Aligned (speech window, EGG window) pairs over one or more utterances.

    Frames are a view over the concatenated utterance signals: only the start
    index of each frame is stored and windows are gathered on demand, so a
    stride-1 dataset costs one integer per frame.

    Attributes:
        window_len: Samples per window.
        stride: Hop between consecutive frame starts within an utterance.
        ids: Utterance ids in order.
    """

    def __init__(
        self,
        speech: np.ndarray,
        egg: np.ndarray,
        ids: Sequence[str],
        offsets: np.ndarray,
        starts: np.ndarray,
        window_len: int,
        stride: int,
    ):
        self._speech = speech
        self._egg = egg
        self.ids = tuple(ids)
        self._offsets = np.asarray(offsets, dtype=np.int64)
        self._starts = np.asarray(starts, dtype=np.int64)
        self.window_len = int(window_len)
        self.stride = int(stride)
        self._taps = np.arange(self.window_len)

    @classmethod
    def empty(cls, window_len: int, stride: int = 1) -> "FrameDataset":
        """A dataset without frames."""
        nothing = np.zeros(0)
        return cls(nothing, nothing, (), np.zeros(1), np.zeros(0), window_len, stride)

    def __len__(self) -> int:
        """Number of frames."""
        return self._starts.shape[0]

    def __getitem__(self, index: int) -> FramePair:
        """The frame at `index`, with copies of its windows."""
        start = int(self._starts[index])
        utterance = int(np.searchsorted(self._offsets, start, side="right") - 1)
        window = slice(start, start + self.window_len)
        return FramePair(
            speech_window=self._speech[window].copy(),
            egg_window=self._egg[window].copy(),
            origin=(self.ids[utterance], start - int(self._offsets[utterance])),
        )

    def __iter__(self):
        """Iterates over the frames in order."""
        return (self[i] for i in range(len(self)))

    @property
    def origins(self) -> List[Tuple[str, int]]:
        """
        The (utterance id, start index) of every frame, in dataset order.
        """
        utterances = np.searchsorted(self._offsets, self._starts, side="right") - 1
        return [
            (self.ids[u], int(s - self._offsets[u]))
            for u, s in zip(utterances, self._starts)
        ]

    def speech_windows(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Gathers speech windows into a `len(indices)` x W matrix.
        """
        starts = self._starts if indices is None else self._starts[indices]
        return self._speech[starts[:, None] + self._taps]

    def egg_windows(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Gathers EGG windows into a `len(indices)` x W matrix.
        """
        starts = self._starts if indices is None else self._starts[indices]
        return self._egg[starts[:, None] + self._taps]

    def batch(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns the speech and EGG matrices of the given frames.
        """
        return self.speech_windows(indices), self.egg_windows(indices)

    def without_silent_targets(self, floor: float = 1e-3) -> "FrameDataset":
        """
        Drops frames whose EGG window peak is below `floor`; the cosine
        distance is undefined for an all-zero target.
        """
        if not len(self):
            return self
        chunks = np.array_split(np.arange(len(self)), max(1, len(self) // 4096))
        peaks = np.concatenate(
            [np.max(np.abs(self.egg_windows(chunk)), axis=1) for chunk in chunks]
        )
        keep = peaks >= floor
        return FrameDataset(
            self._speech,
            self._egg,
            self.ids,
            self._offsets,
            self._starts[keep],
            self.window_len,
            self.stride,
        )


def frame(
    pair: UtterancePair, window_ms: float = 12.0, stride: int = 1
) -> FrameDataset:
    """
    Frames one utterance into fixed, time-aligned windows.

    Args:
        pair: The aligned utterance.
        window_ms: Window length in milliseconds.
        stride: Hop between frame starts in samples.

    Returns:
        `floor((len - W) / stride) + 1` frames in start order.

    Example:
        ```python
        from prefect_speech2egg.preprocess import frame

        frames = frame(pair, window_ms=12.0, stride=1)
        speech, egg = frames.batch(range(256))
        ```
    """
    return frame_many([pair], window_ms=window_ms, stride=stride, strict=True)


def frame_many(
    pairs: Iterable[UtterancePair],
    window_ms: float = 12.0,
    stride: int = 1,
    rate: Optional[int] = None,
    strict: bool = False,
) -> FrameDataset:
    """
    Frames several utterances into one dataset, ordered by utterance then
    start index.

    Args:
        pairs: Utterances sharing one sampling rate.
        window_ms: Window length in milliseconds.
        stride: Hop between frame starts in samples.
        rate: Rate used to size the window when `pairs` is empty.
        strict: Raise on an utterance shorter than one window instead of
            skipping it with a warning.

    Returns:
        The combined dataset.
    """
    if stride < 1:
        raise ConfigError(f"Frame stride must be at least 1; got {stride}.")
    pairs = list(pairs)
    rates = {pair.rate for pair in pairs}
    if len(rates) > 1:
        raise DataError(f"Utterances have mixed sampling rates {sorted(rates)}.")
    rate = rates.pop() if rates else rate
    if rate is None:
        raise ConfigError("Cannot size frames without a sampling rate.")
    width = window_length(rate, window_ms)
    if width < 1:
        raise ConfigError(f"A {window_ms} ms window holds no samples at {rate} Hz.")

    logger = get_logger(__name__)
    speech, egg, ids, offsets, starts = [], [], [], [0], []
    for pair in pairs:
        if len(pair) < width:
            message = (
                f"utterance too short: {pair.id!r} has {len(pair)} samples, "
                f"fewer than one {width}-sample window."
            )
            if strict:
                raise DataError(message)
            logger.warning(f"Skipping {message}")
            continue
        base = offsets[-1]
        starts.append(base + np.arange(0, len(pair) - width + 1, stride))
        speech.append(pair.speech.samples)
        egg.append(pair.egg.samples)
        ids.append(pair.id)
        offsets.append(base + len(pair))

    if not ids:
        return FrameDataset.empty(width, stride)
    return FrameDataset(
        np.concatenate(speech),
        np.concatenate(egg),
        ids,
        np.asarray(offsets[:-1]),
        np.concatenate(starts),
        width,
        stride,
    )


@dataclass(frozen=True)
class NoiseSpec:
    """
    A calibrated noise condition.

    Attributes:
        kind: White Gaussian noise or looped babble.
        snr_db: Target signal-to-noise ratio; `math.inf` adds nothing.
        seed: Seed of the noise draw.
        source: The registered babble waveform, required for `kind="babble"`.
    """

    kind: NoiseKind
    snr_db: float
    seed: int = 0
    source: Optional[Waveform] = None

    def __post_init__(self):
        """Rejects unknown kinds and NaN or -inf SNRs."""
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"Unknown noise kind {self.kind!r}.")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError(f"SNR must be finite or +inf; got {self.snr_db}.")

    @property
    def key(self) -> str:
        """
        The condition name used in reports, e.g. `white@0dB`.
        """
        return f"{self.kind}@{self.snr_db:g}dB"

    def with_seed(self, seed: int) -> "NoiseSpec":
        """The same condition with another noise seed."""
        return replace(self, seed=seed)


def noise_ladder(
    kinds: Sequence[NoiseKind] = ("white", "babble"),
    snrs: Sequence[float] = (0.0, 5.0, 10.0, 15.0, 20.0),
    seed: int = 0,
    babble: Optional[Waveform] = None,
) -> List[NoiseSpec]:
    """
    Builds the list of noise conditions of a sweep, kind-major.
    """
    return [
        NoiseSpec(
            kind=kind,
            snr_db=float(snr),
            seed=seed,
            source=babble if kind == "babble" else None,
        )
        for kind in kinds
        for snr in snrs
    ]


def add_noise(w: Waveform, spec: NoiseSpec) -> Waveform:
    """
    Adds noise scaled so that the signal-to-added-noise power ratio equals
    `spec.snr_db` exactly.

    Args:
        w: The clean waveform.
        spec: The noise condition.

    Returns:
        The corrupted waveform with the same length and rate.
    """
    signal_power = float(np.mean(w.samples**2))
    if signal_power == 0.0:
        raise DataError("Cannot add noise at a given SNR to a zero-energy signal.")
    if spec.snr_db == math.inf:
        return w

    rng = np.random.default_rng(spec.seed)
    n = len(w)
    if spec.kind == "white":
        noise = rng.standard_normal(n)
    else:
        if spec.source is None:
            raise DataError(
                "Babble noise requested but no babble source is registered."
            )
        source = spec.source.samples
        offset = int(rng.integers(len(source)))
        noise = source[(offset + np.arange(n)) % len(source)]

    noise_power = float(np.mean(noise**2))
    if noise_power == 0.0:
        raise DataError(f"The {spec.kind} noise source has zero energy.")
    gain = math.sqrt(signal_power / (noise_power * 10.0 ** (spec.snr_db / 10.0)))
    return w.with_samples(w.samples + gain * noise)


def augment_input(x: np.ndarray, noise_std: float, seed: SeedLike = None) -> np.ndarray:
    """
    Adds i.i.d. zero-mean Gaussian noise of standard deviation `noise_std`.

    Args:
        x: A speech window or a batch of windows.
        noise_std: Noise standard deviation; 0 returns `x` unchanged.
        seed: A seed or a generator owned by the caller.

    Returns:
        `x + eps`, same shape as `x`.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative; got {noise_std}.")
    x = np.asarray(x, dtype=np.float64)
    if noise_std == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, noise_std, size=x.shape)


def speech_polarity_statistic(samples: np.ndarray) -> float:
    """
    Skewness of the slope distribution. Positive polarity speech has
    negatively skewed slopes; 0 for a signal without slope variation.
    """
    slopes = np.diff(np.asarray(samples, dtype=np.float64))
    if slopes.size < 3 or np.std(slopes) == 0.0:
        return 0.0
    return float(skew(slopes))


def egg_polarity_statistic(samples: np.ndarray, fraction: float = 0.01) -> float:
    """
    Signed mean of the largest-magnitude dEGG values over their mean magnitude,
    in [-1, 1]. Negative when the steepest events are falls, i.e. when glottal
    closures are negative dEGG peaks.
    """
    slopes = np.diff(np.asarray(samples, dtype=np.float64))
    magnitudes = np.abs(slopes)
    if magnitudes.size == 0 or magnitudes.max() == 0.0:
        return 0.0
    count = max(1, int(math.ceil(fraction * magnitudes.size)))
    largest = np.argpartition(magnitudes, -count)[-count:]
    return float(np.mean(slopes[largest]) / np.mean(magnitudes[largest]))


def normalize_speech_polarity(
    speech: Waveform, dead_zone: float = POLARITY_DEAD_ZONE
) -> Tuple[Waveform, Optional[str]]:
    """
    Flips speech with negative polarity, the speech half of
    `normalize_polarity` for recordings without an EGG.

    Returns:
        The normalized speech and a warning when the polarity is ambiguous.
    """
    statistic = speech_polarity_statistic(speech.samples)
    if abs(statistic) < dead_zone:
        return speech, f"ambiguous speech polarity (statistic {statistic:.3f})"
    if statistic > 0:
        return speech.with_samples(-speech.samples), None
    return speech, None


def normalize_polarity(
    pair: UtterancePair, dead_zone: float = POLARITY_DEAD_ZONE
) -> UtterancePair:
    """
    Flips the speech channel when it has negative polarity and the EGG channel
    when its glottal closures would be positive dEGG peaks. A channel whose
    detector statistic lies within the dead zone passes through unchanged and
    a warning is attached to the returned pair.

    Args:
        pair: The aligned utterance.
        dead_zone: Half-width of the ambiguous statistic range.

    Returns:
        The polarity-normalized pair.
    """
    logger = get_logger(__name__)
    warnings = list(pair.warnings)
    speech, egg = pair.speech, pair.egg

    speech, warning = normalize_speech_polarity(speech, dead_zone)
    if warning:
        warnings.append(warning)

    egg_stat = egg_polarity_statistic(egg.samples)
    if abs(egg_stat) < dead_zone:
        warnings.append(f"ambiguous EGG polarity (statistic {egg_stat:.3f})")
    elif egg_stat > 0:
        egg = egg.with_samples(-egg.samples)

    for message in warnings[len(pair.warnings) :]:
        logger.warning(f"Utterance {pair.id!r}: {message}.")
    return replace(pair, speech=speech, egg=egg, warnings=tuple(warnings))
