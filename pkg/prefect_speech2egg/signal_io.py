"""Ingestion, validation and persistence of speech/EGG waveforms and manifests"""

import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import soundfile as sf
from scipy.signal import resample_poly

from prefect_speech2egg.exceptions import DataError
from prefect_speech2egg.utilities import get_logger

ChannelRole = Literal["speech", "egg"]
SplitTag = Literal["train", "val", "test"]
BitDepth = Union[int, str]

DEFAULT_RATE = 16000
MANIFEST_COLUMNS = ["id", "speech_path", "egg_path", "split"]
SPLIT_TAGS = ("train", "val", "test")

_READABLE_SUBTYPES = {"PCM_U8", "PCM_S8", "PCM_16", "PCM_24", "PCM_32", "FLOAT"}
_WRITE_SUBTYPES: Dict[BitDepth, str] = {
    16: "PCM_16",
    24: "PCM_24",
    32: "PCM_32",
    "float": "FLOAT",
}


@dataclass(frozen=True)
class Waveform:
    """
    A sampled 1-D signal with its rate.

    Attributes:
        samples: Real amplitudes, nominally in [-1, 1].
        rate: Samples per second.
        channel_role: Whether the signal is speech or EGG.
    """

    samples: np.ndarray
    rate: int
    channel_role: ChannelRole = "speech"

    def __post_init__(self):
        """Coerces samples to floats and rejects bad shapes, rates or values."""
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"Waveform must be 1-D; got shape {samples.shape}.")
        if self.rate <= 0:
            raise DataError(f"Sampling rate must be positive; got {self.rate}.")
        if not np.all(np.isfinite(samples)):
            raise DataError("Waveform contains non-finite amplitudes.")
        if self.channel_role not in ("speech", "egg"):
            raise DataError(f"Unknown channel role {self.channel_role!r}.")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        """Number of samples."""
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """
        Duration in seconds.
        """
        return len(self) / self.rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        """
        Returns a copy holding new samples at the same rate and role.
        """
        return replace(self, samples=samples)


@dataclass(frozen=True)
class UtterancePair:
    """
    Simultaneously recorded speech and EGG channels of one utterance.

    Attributes:
        speech: The speech channel.
        egg: The EGG channel.
        id: The utterance identifier.
        warnings: Flags raised by preprocessing, e.g. ambiguous polarity.
    """

    speech: Waveform
    egg: Waveform
    id: str
    warnings: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        """Rejects channels of different rates or lengths."""
        if self.speech.rate != self.egg.rate:
            raise DataError(
                f"Utterance {self.id!r} has speech at {self.speech.rate} Hz "
                f"but EGG at {self.egg.rate} Hz."
            )
        if len(self.speech) != len(self.egg):
            raise DataError(
                f"Utterance {self.id!r} has {len(self.speech)} speech samples "
                f"but {len(self.egg)} EGG samples."
            )

    def __len__(self) -> int:
        """Number of samples per channel."""
        return len(self.speech)

    @property
    def rate(self) -> int:
        """Sampling rate shared by both channels."""
        return self.speech.rate


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row: an utterance id, its two files and its split."""

    id: str
    speech_path: Path
    egg_path: Path
    split: SplitTag


@dataclass(frozen=True)
class DatasetManifest:
    """
    A validated list of utterance file pairs.

    Attributes:
        entries: The manifest rows, paths already resolved.
        rate: The target rate every utterance is brought to at load time.
    """

    entries: Tuple[ManifestEntry, ...]
    rate: int = DEFAULT_RATE

    def __len__(self) -> int:
        """Number of entries."""
        return len(self.entries)

    def split(self, tag: SplitTag) -> Tuple[ManifestEntry, ...]:
        """
        Returns the entries carrying the given split tag, in manifest order.
        """
        return tuple(entry for entry in self.entries if entry.split == tag)


def _read_channel(
    path: Union[str, os.PathLike], channel: Optional[int]
) -> Tuple[np.ndarray, int]:
    """Reads one channel of a sound file as floats with its rate."""
    path = Path(path)
    try:
        info = sf.info(str(path))
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, OSError) as exc:
        raise DataError(f"Cannot read waveform file {str(path)!r}: {exc}") from exc
    if info.format not in ("WAV", "WAVEX") or info.subtype not in _READABLE_SUBTYPES:
        raise DataError(
            f"{str(path)!r} is {info.format}/{info.subtype}; only linear PCM or "
            "32-bit float RIFF/WAVE files are supported."
        )
    n_channels = data.shape[1]
    if channel is None:
        if n_channels != 1:
            raise DataError(
                f"{str(path)!r} has {n_channels} channels; declare which one to use."
            )
        channel = 0
    if not 0 <= channel < n_channels:
        raise DataError(
            f"Channel {channel} requested from {str(path)!r}, "
            f"which has {n_channels} channels."
        )
    samples = data[:, channel]
    if samples.size == 0:
        raise DataError(f"{str(path)!r} holds a zero-length signal.")
    return samples, int(rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """
    Resamples with a windowed-sinc polyphase filter whose cutoff sits at the
    lower of the two Nyquist frequencies.

    Args:
        w: The waveform to resample.
        target_rate: The new rate in Hz.

    Returns:
        The resampled waveform; unchanged when the rates already agree.
    """
    if target_rate <= 0:
        raise DataError(f"Cannot resample to a non-positive rate ({target_rate}).")
    if target_rate == w.rate:
        return w
    ratio = Fraction(int(target_rate), int(w.rate))
    samples = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    get_logger(__name__).debug(
        f"Resampled {w.channel_role} from {w.rate} Hz to {target_rate} Hz."
    )
    return Waveform(samples=samples, rate=int(target_rate), channel_role=w.channel_role)


def peak_normalize(w: Waveform) -> Waveform:
    """
    Scales the waveform so that its largest absolute amplitude is 1.

    Raises:
        DataError: For an all-zero signal, whose peak cannot be normalized.
    """
    peak = np.max(np.abs(w.samples)) if len(w) else 0.0
    if peak == 0.0:
        raise DataError("zero-energy signal: peak normalization is undefined.")
    return w.with_samples(w.samples / peak)


def load_waveform(
    path: Union[str, os.PathLike],
    role: ChannelRole,
    target_rate: Optional[int] = DEFAULT_RATE,
    channel: Optional[int] = None,
    normalize: bool = True,
) -> Waveform:
    """
    Loads one channel of a RIFF/WAVE file.

    Args:
        path: The file to read.
        role: Whether the channel holds speech or EGG.
        target_rate: Rate to resample to; `None` keeps the file's rate.
        channel: Channel index for multi-channel files.
        normalize: Whether to peak-normalize after resampling.

    Returns:
        The validated waveform.

    Example:
        Load the EGG channel of a two-channel recording.
        ```python
        from prefect_speech2egg.signal_io import load_waveform

        egg = load_waveform("arctic_a0001.wav", role="egg", channel=1)
        ```
    """
    samples, rate = _read_channel(path, channel)
    if not np.all(np.isfinite(samples)):
        raise DataError(f"{str(path)!r} contains non-finite amplitudes.")
    w = Waveform(samples=samples, rate=rate, channel_role=role)
    if target_rate is not None:
        w = resample(w, target_rate)
    if normalize:
        try:
            w = peak_normalize(w)
        except DataError as exc:
            raise DataError(f"{str(path)!r}: {exc}") from exc
    return w


def _trim_pair(speech: Waveform, egg: Waveform, id: str) -> UtterancePair:
    """Pairs two channels cut to the shorter length."""
    length = min(len(speech), len(egg))
    return UtterancePair(
        speech=speech.with_samples(speech.samples[:length]),
        egg=egg.with_samples(egg.samples[:length]),
        id=id,
    )


def load_pair(
    speech_path: Union[str, os.PathLike],
    egg_path: Union[str, os.PathLike],
    target_rate: int = DEFAULT_RATE,
    id: Optional[str] = None,
    speech_channel: Optional[int] = None,
    egg_channel: Optional[int] = None,
) -> UtterancePair:
    """
    Loads a speech file and its EGG file as one aligned utterance. Both
    channels are resampled to `target_rate`, peak-normalized independently and
    trimmed to the shorter length.

    Args:
        speech_path: The speech recording.
        egg_path: The simultaneous EGG recording.
        target_rate: The common rate in Hz.
        id: The utterance identifier; defaults to the speech file stem.
        speech_channel: Channel index when the speech file is multi-channel.
        egg_channel: Channel index when the EGG file is multi-channel.

    Returns:
        The aligned pair.
    """
    if target_rate <= 0:
        raise DataError(f"Target rate must be positive; got {target_rate}.")
    speech = load_waveform(speech_path, "speech", target_rate, speech_channel)
    egg = load_waveform(egg_path, "egg", target_rate, egg_channel)
    return _trim_pair(speech, egg, id or Path(speech_path).stem)


def load_stereo_pair(
    path: Union[str, os.PathLike],
    target_rate: int = DEFAULT_RATE,
    speech_channel: int = 0,
    egg_channel: int = 1,
    id: Optional[str] = None,
) -> UtterancePair:
    """
    Loads a two-channel recording that carries speech and EGG side by side.
    """
    return load_pair(
        path,
        path,
        target_rate=target_rate,
        id=id or Path(path).stem,
        speech_channel=speech_channel,
        egg_channel=egg_channel,
    )


def load_manifest(
    path: Union[str, os.PathLike], rate: int = DEFAULT_RATE
) -> DatasetManifest:
    """
    Reads and validates a dataset manifest: a UTF-8 CSV file with header
    `id,speech_path,egg_path,split`, paths relative to the manifest's directory.

    Args:
        path: The manifest file.
        rate: The target rate recorded in the manifest.

    Returns:
        The manifest with resolved paths.

    Raises:
        DataError: On parse errors, duplicate ids, unknown split tags
            or missing files.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Manifest {str(path)!r} does not exist.")
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"Cannot parse manifest {str(path)!r}: {exc}") from exc
    if list(table.columns) != MANIFEST_COLUMNS:
        raise DataError(
            f"Manifest {str(path)!r} must have header {','.join(MANIFEST_COLUMNS)}; "
            f"got {','.join(map(str, table.columns))}."
        )

    duplicated = table["id"][table["id"].duplicated()]
    if not duplicated.empty:
        raise DataError(
            f"Manifest {str(path)!r} has duplicate id {duplicated.iloc[0]!r}."
        )

    root = path.parent
    entries = []
    for row in table.itertuples(index=False):
        if row.split not in SPLIT_TAGS:
            raise DataError(f"Entry {row.id!r} has unknown split tag {row.split!r}.")
        speech_path = root / row.speech_path
        egg_path = root / row.egg_path
        for file_path in (speech_path, egg_path):
            if not file_path.is_file():
                raise DataError(
                    f"Entry {row.id!r} references missing file {str(file_path)!r}."
                )
        entries.append(
            ManifestEntry(
                id=row.id, speech_path=speech_path, egg_path=egg_path, split=row.split
            )
        )
    return DatasetManifest(entries=tuple(entries), rate=rate)


def write_manifest(manifest: DatasetManifest, path: Union[str, os.PathLike]) -> Path:
    """
    Writes a manifest in the format `load_manifest` reads, with paths stored
    relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent.resolve()
    rows = [
        (
            entry.id,
            os.path.relpath(Path(entry.speech_path).resolve(), root),
            os.path.relpath(Path(entry.egg_path).resolve(), root),
            entry.split,
        )
        for entry in manifest.entries
    ]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(
            path, index=False, encoding="utf-8", lineterminator="\n"
        )
    except OSError as exc:
        raise DataError(f"Cannot write manifest {str(path)!r}: {exc}") from exc
    return path


def _quantize(samples: np.ndarray, bit_depth: BitDepth) -> np.ndarray:
    """Converts samples to the integer or float type of `bit_depth`."""
    if bit_depth == "float":
        return samples.astype(np.float32)
    if bit_depth == 16:
        scaled = np.round(samples * 2**15)
        return np.clip(scaled, -(2**15), 2**15 - 1).astype(np.int16)
    # 24-bit values travel in the upper bits of an int32 container.
    bits = int(bit_depth)
    full_scale = 2 ** (bits - 1)
    scaled = np.clip(np.round(samples * full_scale), -full_scale, full_scale - 1)
    return (scaled.astype(np.int64) << (32 - bits)).astype(np.int32)


def save_waveform(
    w: Waveform, path: Union[str, os.PathLike], bit_depth: BitDepth = "float"
) -> Path:
    """
    Writes a mono RIFF/WAVE file. Loading it back reproduces the samples up to
    the quantization of the chosen depth: 2^-(bits-1) for integer PCM, exact
    for float32-representable samples at `"float"` depth.

    Args:
        w: The waveform to write.
        path: Destination file.
        bit_depth: 16, 24 or 32 for integer PCM, or `"float"` for 32-bit float.

    Returns:
        The written path.
    """
    if bit_depth not in _WRITE_SUBTYPES:
        raise DataError(f"Unsupported bit depth {bit_depth!r}.")
    path = Path(path)
    try:
        sf.write(
            str(path),
            _quantize(w.samples, bit_depth),
            w.rate,
            subtype=_WRITE_SUBTYPES[bit_depth],
            format="WAV",
        )
    except (RuntimeError, OSError) as exc:
        raise DataError(f"Cannot write waveform to {str(path)!r}: {exc}") from exc
    return path
