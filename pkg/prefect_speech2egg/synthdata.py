"""Synthetic speech/EGG utterances with exactly known glottal ground truth"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.signal import lfilter

from prefect_speech2egg.exceptions import ConfigError, DataError
from prefect_speech2egg.signal_io import (
    DEFAULT_RATE,
    DatasetManifest,
    ManifestEntry,
    Waveform,
    save_waveform,
    write_manifest,
)
from prefect_speech2egg.utilities import derive_seed, get_logger

Formant = Tuple[float, float]
Range = Tuple[float, float]

ONSET_PERIODS = 3.0
OFFSET_PERIODS = 3.0
CONTACT_BUMP = 0.05
SILENCE_FLOOR = 1e-4
PITCH_GLIDE = 0.15


@dataclass(frozen=True)
class GlottalCycleSpec:
    """
    Controls of one glottal cycle.

    Attributes:
        period: Cycle duration in seconds.
        cq: Contact quotient, the share of the period the folds are in contact.
        sq: Speed quotient, opening time over closing time within the open phase.
        amplitude: Level of maximum glottal opening.
    """

    period: float
    cq: float
    sq: float
    amplitude: float = 1.0

    def __post_init__(self):
        """Rejects non-positive periods and amplitudes or quotients out of range."""
        problems = []
        if not self.period > 0:
            problems.append(f"period {self.period} must be positive")
        if not 0 < self.cq < 1:
            problems.append(f"cq {self.cq} must lie in (0, 1)")
        if not self.sq > 0:
            problems.append(f"sq {self.sq} must be positive")
        if not self.amplitude > 0:
            problems.append(f"amplitude {self.amplitude} must be positive")
        if problems:
            raise DataError(f"Invalid glottal cycle: {'; '.join(problems)}.")

    @property
    def contact(self) -> float:
        """Time in contact, from the GCI to the GOI."""
        return self.cq * self.period

    @property
    def opening(self) -> float:
        """
        Time from the GOI to maximum opening.
        """
        return (1.0 - self.cq) * self.period * self.sq / (1.0 + self.sq)

    @property
    def closing(self) -> float:
        """
        Time from maximum opening to the next GCI.
        """
        return (1.0 - self.cq) * self.period / (1.0 + self.sq)


@dataclass(frozen=True)
class SynthUtteranceTruth:
    """
    Exact glottal events of a synthetic utterance, times in seconds.

    Attributes:
        gci: Glottal closure instants.
        goi: Glottal opening instants; `goi[k]` follows `gci[k]`.
        peak: Instants of maximum opening; `peak[k]` follows `goi[k]`.
        voiced: Voiced regions as (start, end) pairs.
        per_cycle: (cq, oq, sq) of every cycle, aligned with `gci`.
        rate: Sampling rate of the waveform the truth belongs to.
    """

    gci: Tuple[float, ...]
    goi: Tuple[float, ...]
    peak: Tuple[float, ...]
    voiced: Tuple[Tuple[float, float], ...]
    per_cycle: Tuple[Tuple[float, float, float], ...]
    rate: int = DEFAULT_RATE

    def __post_init__(self):
        """Checks the ordering of the events."""
        gci, goi = np.asarray(self.gci), np.asarray(self.goi)
        if np.any(np.diff(gci) <= 0) or np.any(np.diff(goi) <= 0):
            raise DataError("Truth instants must be strictly increasing.")
        if gci.shape != goi.shape or np.any(goi <= gci):
            raise DataError("Every GOI must follow its own GCI.")
        if np.any(goi[:-1] >= gci[1:]):
            raise DataError("Every GOI must precede the next GCI.")

    def shifted(self, offset: float) -> "SynthUtteranceTruth":
        """The same truth moved later by `offset` seconds."""
        return SynthUtteranceTruth(
            gci=tuple(t + offset for t in self.gci),
            goi=tuple(t + offset for t in self.goi),
            peak=tuple(t + offset for t in self.peak),
            voiced=tuple((a + offset, b + offset) for a, b in self.voiced),
            per_cycle=self.per_cycle,
            rate=self.rate,
        )

    @classmethod
    def concatenate(
        cls, parts: Sequence["SynthUtteranceTruth"], rate: int
    ) -> "SynthUtteranceTruth":
        """
        Joins truths that were already shifted onto one time axis.
        """
        return cls(
            gci=sum((p.gci for p in parts), ()),
            goi=sum((p.goi for p in parts), ()),
            peak=sum((p.peak for p in parts), ()),
            voiced=sum((p.voiced for p in parts), ()),
            per_cycle=sum((p.per_cycle for p in parts), ()),
            rate=rate,
        )

    def to_json(self) -> Dict[str, Any]:
        """The truth as a JSON-safe dict."""
        return {
            "gci": list(self.gci),
            "goi": list(self.goi),
            "peak": list(self.peak),
            "voiced": [list(region) for region in self.voiced],
            "cycles": [{"cq": cq, "oq": oq, "sq": sq} for cq, oq, sq in self.per_cycle],
            "rate": self.rate,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "SynthUtteranceTruth":
        """Reads a truth written by `to_json`."""
        try:
            return cls(
                gci=tuple(float(t) for t in data["gci"]),
                goi=tuple(float(t) for t in data["goi"]),
                peak=tuple(float(t) for t in data.get("peak", ())),
                voiced=tuple((float(a), float(b)) for a, b in data["voiced"]),
                per_cycle=tuple(
                    (float(c["cq"]), float(c["oq"]), float(c["sq"]))
                    for c in data["cycles"]
                ),
                rate=int(data.get("rate", DEFAULT_RATE)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Malformed truth record: {exc}") from exc

    def save(self, path: Union[str, os.PathLike]) -> Path:
        """Writes the truth as JSON."""
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "SynthUtteranceTruth":
        """Reads a truth file written by `save`."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"Cannot read truth file {str(path)!r}: {exc}") from exc
        return cls.from_json(data)


def _closing_shape(s: np.ndarray) -> np.ndarray:
    """Quarter sine under an odd warp of slope 2 at the closure, 1 at the peak."""
    warp = 2.0 * s - 2.0 * s**3 + s**5
    return np.sin(0.5 * np.pi * warp)


def _opening_shape(s: np.ndarray) -> np.ndarray:
    """Quarter sine rising from 0 to 1 over `s` in [0, 1]."""
    return np.sin(0.5 * np.pi * s)


def synth_egg(
    cycles: Sequence[GlottalCycleSpec],
    rate: int = DEFAULT_RATE,
    lead_silence: float = 0.02,
    trail_silence: float = 0.02,
) -> Tuple[Waveform, SynthUtteranceTruth]:
    """
    Synthesizes one voiced run of EGG with analytically placed epochs.

    Each cycle starts at its GCI, stays in contact for `cq * period` (a flat
    floor carrying a shallow raised-cosine bump) and then opens: a quarter-sine
    rise to the maximum opening, whose steepest point is the GOI, followed by a
    warped quarter-sine fall whose steepest point is the next GCI. The rise and
    fall durations are in ratio `sq`. The run starts with a slow onset and a
    closing lead-in so that the first GCI is a real closure, and ends with a slow
    offset after the last maximum opening.

    Args:
        cycles: The cycles of the run, in order.
        rate: Sampling rate in Hz.
        lead_silence: Silence before the onset, in seconds.
        trail_silence: Silence after the offset, in seconds.

    Returns:
        The EGG waveform and its exact truth record.

    Example:
        ```python
        from prefect_speech2egg.synthdata import GlottalCycleSpec, synth_egg

        egg, truth = synth_egg([GlottalCycleSpec(period=0.008, cq=0.53, sq=1.2)] * 50)
        ```
    """
    if not cycles:
        raise DataError("A voiced run needs at least one glottal cycle.")
    if rate <= 0:
        raise DataError(f"Sampling rate must be positive; got {rate}.")
    n = len(cycles)
    period = np.array([c.period for c in cycles])
    amplitude = np.array([c.amplitude for c in cycles])
    contact = np.array([c.contact for c in cycles])
    opening = np.array([c.opening for c in cycles])
    closing = np.array([c.closing for c in cycles])

    onset_start = lead_silence
    onset = ONSET_PERIODS * period[0]
    gci = np.empty(n)
    gci[0] = onset_start + onset + closing[0]
    for k in range(1, n):
        gci[k] = gci[k - 1] + period[k - 1]
    goi = gci + contact
    peak = goi + opening
    offset = OFFSET_PERIODS * period[-1]
    offset_end = peak[-1] + offset

    t = np.arange(int(math.ceil((offset_end + trail_silence) * rate)) + 1) / rate
    y = np.zeros_like(t)

    def fill(start, end, shape):
        """Writes `shape` over the samples in [start, end)."""
        lo, hi = np.searchsorted(t, [start, end], side="left")
        y[lo:hi] = shape(t[lo:hi])

    fill(
        onset_start,
        onset_start + onset,
        lambda u: amplitude[0] * 0.5 * (1 - np.cos(np.pi * (u - onset_start) / onset)),
    )
    for k in range(n):
        prev_amp = amplitude[k - 1] if k else amplitude[0]
        prev_closing = closing[k - 1] if k else closing[0]
        amp, rise = amplitude[k], opening[k]
        g, o = gci[k], goi[k]

        # Contact floor where the closing and opening lobes meet with matched slopes.
        floor = min(
            0.5 * min(prev_amp, amp),
            0.6 * contact[k] / (prev_closing / prev_amp + rise / amp),
        )
        settle = floor * prev_closing / prev_amp
        lift = floor * rise / amp
        flat = contact[k] - settle - lift
        bump = CONTACT_BUMP * floor * min(1.0, flat / prev_closing, flat / rise)
        flat_start = g + settle

        fill(
            g - prev_closing,
            g,
            lambda u: prev_amp * _closing_shape((g - u) / prev_closing),
        )
        fill(g, flat_start, lambda u: -floor * _closing_shape((u - g) / settle))
        fill(
            flat_start,
            o - lift,
            lambda u: -floor
            - bump * 0.5 * (1 - np.cos(2 * np.pi * (u - flat_start) / flat)),
        )
        fill(o - lift, o, lambda u: floor * _opening_shape((u - o) / lift))
        fill(o, peak[k], lambda u: amp * _opening_shape((u - o) / rise))

    last_peak, last_amp = peak[-1], amplitude[-1]
    fill(
        last_peak,
        offset_end,
        lambda u: last_amp * 0.5 * (1 + np.cos(np.pi * (u - last_peak) / offset)),
    )

    truth = SynthUtteranceTruth(
        gci=tuple(float(v) for v in gci),
        goi=tuple(float(v) for v in goi),
        peak=tuple(float(v) for v in peak),
        voiced=((float(onset_start), float(offset_end)),),
        per_cycle=tuple((c.cq, 1.0 - c.cq, c.sq) for c in cycles),
        rate=rate,
    )
    return Waveform(samples=y, rate=rate, channel_role="egg"), truth


def resonator_coefficients(
    center: float, bandwidth: float, rate: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Second-order all-pole resonator with unity gain at DC.

    Returns:
        The `(b, a)` coefficients for `scipy.signal.lfilter`.
    """
    radius = math.exp(-math.pi * bandwidth / rate)
    theta = 2.0 * math.pi * center / rate
    a = np.array([1.0, -2.0 * radius * math.cos(theta), radius**2])
    return np.array([a.sum()]), a


def synth_speech_from_egg(
    egg: Waveform,
    formants: Sequence[Formant],
    seed: int = 0,
    aspiration_std: float = 0.02,
) -> Waveform:
    """
    Source-filter speech driven by the differentiated EGG.

    The dEGG excitation runs through a cascade of second-order resonators, one
    per formant; the voiced result is peak-normalized and seeded Gaussian
    aspiration noise is added wherever the EGG is silent.

    Args:
        egg: The driving EGG.
        formants: (center, bandwidth) pairs in Hz.
        seed: Seed of the aspiration noise.
        aspiration_std: Standard deviation of the aspiration noise.

    Returns:
        The speech waveform, same length and rate as `egg`.
    """
    if not formants:
        raise DataError("Speech synthesis needs at least one formant.")
    nyquist = egg.rate / 2.0
    for center, bandwidth in formants:
        if not 0 < center < nyquist:
            raise DataError(
                f"Formant at {center} Hz is outside (0, {nyquist}) Hz, "
                f"the band below the Nyquist frequency."
            )
        if bandwidth <= 0:
            raise DataError(f"Formant bandwidth must be positive; got {bandwidth} Hz.")

    samples = egg.samples
    voiced = np.diff(samples, prepend=samples[:1]) * egg.rate
    for center, bandwidth in formants:
        b, a = resonator_coefficients(center, bandwidth, egg.rate)
        voiced = lfilter(b, a, voiced)
    peak = np.max(np.abs(voiced)) if voiced.size else 0.0
    if peak > 0:
        voiced = voiced / peak

    reach = max(1, int(round(0.005 * egg.rate)))
    silent = maximum_filter1d(np.abs(samples), size=2 * reach + 1) < SILENCE_FLOOR
    rng = np.random.default_rng(seed)
    aspiration = rng.normal(0.0, aspiration_std, size=samples.shape) * silent
    return Waveform(samples=voiced + aspiration, rate=egg.rate, channel_role="speech")


def _check_range(name: str, bounds: Range, lower: float = 0.0, upper: float = math.inf):
    """Rejects an inverted range or one outside (lower, upper]."""
    lo, hi = bounds
    if lo > hi:
        raise ConfigError(f"{name} is inverted: [{lo}, {hi}].")
    if not (lower < lo and hi <= upper):
        raise ConfigError(f"{name} [{lo}, {hi}] must lie within ({lower}, {upper}].")


@dataclass(frozen=True)
class CorpusSpec:
    """
    Knobs of the synthetic corpus generator.

    Attributes:
        n_utterances: Number of utterances to generate.
        seed: Base seed; every utterance derives its own.
        rate: Sampling rate in Hz.
        pitch_range: Fundamental frequency range in Hz.
        cq_range: Contact quotient range.
        sq_range: Speed quotient range.
        amplitude_range: Range of the maximum-opening level.
        voiced_segments: Inclusive range of voiced runs per utterance.
        voiced_duration: Duration range of a voiced run in seconds.
        unvoiced_duration: Duration range of the unvoiced gaps in seconds.
        aspiration_std: Aspiration noise level in unvoiced regions.
        split_fractions: Shares of the train, val and test splits.
        babble_talkers: Talkers summed into the babble source.
        babble_duration: Duration of the babble source in seconds.
        bit_depth: Depth of the written waveform files.
    """

    n_utterances: int = 200
    seed: int = 0
    rate: int = DEFAULT_RATE
    pitch_range: Range = (80.0, 300.0)
    cq_range: Range = (0.3, 0.6)
    sq_range: Range = (0.7, 2.0)
    amplitude_range: Range = (0.85, 1.0)
    voiced_segments: Tuple[int, int] = (1, 3)
    voiced_duration: Range = (0.25, 0.6)
    unvoiced_duration: Range = (0.05, 0.15)
    aspiration_std: float = 0.02
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    babble_talkers: int = 6
    babble_duration: float = 10.0
    bit_depth: Union[int, str] = "float"

    def __post_init__(self):
        """Rejects ranges and shares the generator cannot honour."""
        if self.n_utterances < 0:
            raise ConfigError(f"Cannot generate {self.n_utterances} utterances.")
        if self.rate <= 0:
            raise ConfigError(f"Sampling rate must be positive; got {self.rate}.")
        _check_range("pitch_range", self.pitch_range, upper=self.rate / 4)
        _check_range("cq_range", self.cq_range, upper=1.0 - 1e-9)
        _check_range("sq_range", self.sq_range)
        _check_range("amplitude_range", self.amplitude_range, upper=1.0)
        _check_range("voiced_segments", self.voiced_segments)
        _check_range("voiced_duration", self.voiced_duration)
        _check_range("unvoiced_duration", self.unvoiced_duration)
        fractions = self.split_fractions
        if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
            raise ConfigError(
                f"Split fractions must be three shares summing to 1: {fractions}."
            )
        if self.aspiration_std < 0:
            raise ConfigError("aspiration_std must be non-negative.")


@dataclass
class SynthUtterance:
    """One generated utterance with its truth and vocal-tract formants."""

    speech: Waveform
    egg: Waveform
    truth: SynthUtteranceTruth
    formants: List[Formant] = field(default_factory=list)


def _random_formants(rng: np.random.Generator, rate: int) -> List[Formant]:
    """Three formants in the usual bands, kept below the Nyquist limit."""
    bands = [(300.0, 900.0), (900.0, 2300.0), (2300.0, 3200.0)]
    formants = [
        (float(rng.uniform(lo, hi)), float(rng.uniform(60.0, 150.0)))
        for lo, hi in bands
    ]
    return [f for f in formants if f[0] < 0.45 * rate] or [(0.1 * rate, 80.0)]


def _random_voice(rng: np.random.Generator, spec: CorpusSpec) -> Tuple[float, ...]:
    """Draws one talker's pitch centre, contact quotient and speed quotient."""
    lo, hi = spec.pitch_range
    center = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return center, rng.uniform(*spec.cq_range), rng.uniform(*spec.sq_range)


def _random_cycles(
    rng: np.random.Generator,
    spec: CorpusSpec,
    duration: float,
    voice: Tuple[float, ...],
) -> List[GlottalCycleSpec]:
    """
    Draws one voiced run gliding within +-15% of the talker's pitch centre.

    The run keeps the talker's quotients up to a small per-cycle jitter, so the
    closing slopes of all runs of an utterance stay within a factor of two.
    """
    center, cq, sq = voice
    glide = rng.uniform(-PITCH_GLIDE, PITCH_GLIDE, size=2)
    f_start, f_end = np.clip(center * np.exp(glide), *spec.pitch_range)
    amplitude = rng.uniform(*spec.amplitude_range)
    cycles, elapsed = [], 0.0
    while elapsed < duration or not cycles:
        pitch = f_start + (f_end - f_start) * min(1.0, elapsed / duration)
        jitter = rng.standard_normal(4)
        pitch = float(np.clip(pitch * (1 + 0.005 * jitter[0]), *spec.pitch_range))
        cycle = GlottalCycleSpec(
            period=1.0 / pitch,
            cq=float(np.clip(cq + 0.005 * jitter[1], *spec.cq_range)),
            sq=float(np.clip(sq * math.exp(0.02 * jitter[2]), *spec.sq_range)),
            amplitude=float(
                np.clip(amplitude * (1 + 0.01 * jitter[3]), *spec.amplitude_range)
            ),
        )
        cycles.append(cycle)
        elapsed += cycle.period
    return cycles


def _synth_utterance(
    rng: np.random.Generator, spec: CorpusSpec, aspiration_seed: int
) -> SynthUtterance:
    """Generates one utterance of voiced runs separated by silence."""
    n_runs = int(rng.integers(spec.voiced_segments[0], spec.voiced_segments[1] + 1))
    gaps = rng.uniform(*spec.unvoiced_duration, size=n_runs + 1)
    voice = _random_voice(rng, spec)
    pieces, truths, offset = [], [], 0
    for run in range(n_runs):
        duration = rng.uniform(*spec.voiced_duration)
        egg, truth = synth_egg(
            _random_cycles(rng, spec, duration, voice),
            spec.rate,
            lead_silence=float(gaps[run]),
            trail_silence=float(gaps[-1]) if run == n_runs - 1 else 0.0,
        )
        pieces.append(egg.samples)
        truths.append(truth.shifted(offset / spec.rate))
        offset += len(egg)
    egg = Waveform(np.concatenate(pieces), spec.rate, "egg")
    formants = _random_formants(rng, spec.rate)
    speech = synth_speech_from_egg(egg, formants, aspiration_seed, spec.aspiration_std)
    return SynthUtterance(
        speech=speech,
        egg=egg,
        truth=SynthUtteranceTruth.concatenate(truths, spec.rate),
        formants=formants,
    )


def synth_utterance(spec: CorpusSpec, index: int) -> SynthUtterance:
    """
    Generates utterance `index` of the corpus described by `spec`.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "utterance", index))
    return _synth_utterance(rng, spec, derive_seed(spec.seed, "aspiration", index))


def synth_babble(
    rate: int = DEFAULT_RATE, duration: float = 10.0, talkers: int = 6, seed: int = 0
) -> Waveform:
    """
    Multi-talker babble: the sum of independent synthetic speech streams,
    peak-normalized.

    Args:
        rate: Sampling rate in Hz.
        duration: Length in seconds.
        talkers: Number of summed streams.
        seed: Base seed.

    Returns:
        The babble waveform.
    """
    if talkers < 1 or duration <= 0:
        raise ConfigError("Babble needs at least one talker and a positive duration.")
    spec = CorpusSpec(
        rate=rate,
        voiced_segments=(2, 4),
        voiced_duration=(0.4, 1.2),
        unvoiced_duration=(0.02, 0.08),
    )
    length = int(round(duration * rate))
    babble = np.zeros(length)
    for talker in range(talkers):
        rng = np.random.default_rng(derive_seed(seed, "babble", talker))
        stream, filled = np.zeros(length), 0
        while filled < length:
            aspiration = derive_seed(seed, "babble", talker, filled)
            utterance = _synth_utterance(rng, spec, aspiration)
            chunk = utterance.speech.samples[: length - filled]
            stream[filled : filled + chunk.size] = chunk
            filled += chunk.size
        babble += stream
    peak = np.max(np.abs(babble))
    return Waveform(babble / peak if peak > 0 else babble, rate, "speech")


def _split_tags(n: int, fractions: Sequence[float], seed: int) -> List[str]:
    """Assigns split tags, keeping at least one val and test item when possible."""
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if n >= 3:
        n_val = max(n_val, 1) if fractions[1] > 0 else 0
        n_test = max(n_test, 1) if fractions[2] > 0 else 0
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    tags = ["train"] * n
    for rank, index in enumerate(order):
        if rank < n_val:
            tags[index] = "val"
        elif rank < n_val + n_test:
            tags[index] = "test"
    return tags


def synth_corpus(spec: CorpusSpec, out_dir: Union[str, os.PathLike]) -> DatasetManifest:
    """
    Writes a synthetic corpus: speech and EGG waveform files, one truth JSON
    per utterance, a babble source and the manifest.

    Layout under `out_dir`: `wav/<id>_speech.wav`, `wav/<id>_egg.wav`,
    `truth/<id>.json`, `babble.wav` and `manifest.csv`.

    Args:
        spec: The corpus knobs.
        out_dir: Destination directory, created when missing.

    Returns:
        The manifest of the written corpus.

    Example:
        ```python
        from prefect_speech2egg.synthdata import CorpusSpec, synth_corpus

        manifest = synth_corpus(CorpusSpec(n_utterances=20, seed=7), "data/")
        ```
    """
    logger = get_logger(__name__)
    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
        (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(
            f"Cannot create corpus directory {str(out_dir)!r}: {exc}"
        ) from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"Corpus directory {str(out_dir)!r} is not writable.")

    tags = _split_tags(spec.n_utterances, spec.split_fractions, spec.seed)
    entries = []
    for index, tag in enumerate(tags):
        utterance_id = f"syn{index:04d}"
        utterance = synth_utterance(spec, index)
        speech_path = out_dir / "wav" / f"{utterance_id}_speech.wav"
        egg_path = out_dir / "wav" / f"{utterance_id}_egg.wav"
        save_waveform(utterance.speech, speech_path, spec.bit_depth)
        save_waveform(utterance.egg, egg_path, spec.bit_depth)
        try:
            utterance.truth.save(out_dir / "truth" / f"{utterance_id}.json")
        except OSError as exc:
            raise DataError(f"Cannot write truth for {utterance_id!r}: {exc}") from exc
        entries.append(ManifestEntry(utterance_id, speech_path, egg_path, tag))
        logger.debug(
            f"Synthesized {utterance_id} ({tag}): {len(utterance.truth.gci)} cycles, "
            f"{len(utterance.egg) / spec.rate:.2f} s."
        )

    babble = synth_babble(
        spec.rate,
        spec.babble_duration,
        spec.babble_talkers,
        derive_seed(spec.seed, "babble"),
    )
    save_waveform(babble, out_dir / "babble.wav", spec.bit_depth)

    manifest = DatasetManifest(entries=tuple(entries), rate=spec.rate)
    write_manifest(manifest, out_dir / "manifest.csv")
    logger.info(f"Wrote {len(entries)} synthetic utterances to {str(out_dir)!r}.")
    return manifest


def load_truth(path: Union[str, os.PathLike]) -> SynthUtteranceTruth:
    """
    Reads a truth JSON file written by `synth_corpus`.
    """
    return SynthUtteranceTruth.load(path)
