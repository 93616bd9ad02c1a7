"""EGG evaluation: voicing, dEGG epochs, detection scores, quotients and HNR"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from scipy.ndimage import maximum_filter1d
from scipy.signal import find_peaks

from prefect_speech2egg.exceptions import ConfigError, DataError
from prefect_speech2egg.signal_io import Waveform
from prefect_speech2egg.utilities import get_logger

EpochSource = Literal["reference", "estimated"]
EpochKind = Literal["gci", "goi"]

PEAK_ALPHA = 0.3
PEAK_PERCENTILE = 95.0
# Lower bound of the opt-in local scale, as a share of the region scale.
REGION_FLOOR = 0.25
MIN_PERIOD = 0.002
MAX_PERIOD = 0.02
HNR_CEILING = 5.0
HNR_MIN_CYCLES = 8


@dataclass(frozen=True)
class VoicingMask:
    """
    Voiced regions of an utterance.

    Attributes:
        regions: Sorted, non-overlapping (start, end) pairs in seconds.
    """

    regions: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        """Normalizes regions to floats and rejects overlapping ones."""
        regions = tuple((float(s), float(e)) for s, e in self.regions)
        for (s0, e0), (s1, _) in zip(regions, regions[1:]):
            if s1 < e0:
                raise ValueError(f"Voiced regions overlap or are unsorted: {regions}.")
        if any(e < s for s, e in regions):
            raise ValueError(f"Voiced region ends before it starts: {regions}.")
        object.__setattr__(self, "regions", regions)

    def __len__(self) -> int:
        """Number of voiced regions."""
        return len(self.regions)

    def __iter__(self) -> Iterator[Tuple[float, float]]:
        """Iterates over (start, end) pairs."""
        return iter(self.regions)

    @property
    def total(self) -> float:
        """Voiced duration in seconds."""
        return sum(e - s for s, e in self.regions)

    @classmethod
    def whole(cls, w: Waveform) -> "VoicingMask":
        """One region spanning the whole waveform."""
        return cls(((0.0, w.duration),))


@dataclass(frozen=True)
class EpochSet:
    """
    Glottal closure and opening instants of one utterance.

    Attributes:
        gci: Closure instants in seconds, strictly increasing.
        goi: Opening instants in seconds, strictly increasing.
        source: Whether the instants come from a reference or an estimated EGG.
    """

    gci: Tuple[float, ...] = ()
    goi: Tuple[float, ...] = ()
    source: EpochSource = "reference"

    def __post_init__(self):
        """Normalizes instants to floats and checks their order."""
        for name in ("gci", "goi"):
            values = tuple(float(v) for v in getattr(self, name))
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} instants must be strictly increasing.")
            object.__setattr__(self, name, values)
        if self.source not in ("reference", "estimated"):
            raise ValueError(f"Unknown epoch source {self.source!r}.")

    def instants(self, kind: EpochKind) -> np.ndarray:
        """The GCI or GOI instants as an array."""
        if kind not in ("gci", "goi"):
            raise ValueError(f"Unknown epoch kind {kind!r}.")
        return np.asarray(getattr(self, kind))


@dataclass(frozen=True)
class CycleMetrics:
    """
    Quotients of one glottal cycle.

    Attributes:
        cycle_start: GCI opening the cycle, seconds.
        cycle_end: GCI closing the cycle, seconds.
        cq: Contact quotient.
        oq: Open quotient, `1 - cq`.
        sq: Speed quotient, opening time over closing time.
    """

    cycle_start: float
    cycle_end: float
    cq: float
    oq: float
    sq: float

    @property
    def period(self) -> float:
        """Cycle duration in seconds."""
        return self.cycle_end - self.cycle_start


@dataclass(frozen=True)
class CycleTable:
    """
    Measured cycles and the number of cycles that could not be measured.
    """

    cycles: Tuple[CycleMetrics, ...] = ()
    skipped: int = 0

    def __len__(self) -> int:
        """Number of measured cycles."""
        return len(self.cycles)

    def __iter__(self) -> Iterator[CycleMetrics]:
        """Iterates over the measured cycles."""
        return iter(self.cycles)

    def __getitem__(self, index: int) -> CycleMetrics:
        """The measured cycle at `index`."""
        return self.cycles[index]

    def mean(self, name: str) -> float:
        """Mean of one quotient over the cycles, NaN when none were measured."""
        if not self.cycles:
            return math.nan
        return float(np.mean([getattr(c, name) for c in self.cycles]))


@dataclass(frozen=True)
class DetectionScore:
    """
    Cycle-based epoch detection score.

    Attributes:
        idr: Identification rate, percent of reference cycles with exactly one
            estimate.
        mr: Miss rate, percent of cycles with none.
        far: False alarm rate, percent of cycles with more than one.
        ida: Identification accuracy, standard deviation of the timing error
            over identified cycles in milliseconds.
        cycles: Number of reference cycles.
        identified: Number of identified cycles.
        bias: Mean timing error over identified cycles in milliseconds.
    """

    idr: float
    mr: float
    far: float
    ida: float
    cycles: int = 0
    identified: int = 0
    bias: float = 0.0

    @classmethod
    def pool(cls, scores: Sequence["DetectionScore"]) -> "DetectionScore":
        """
        Dataset-level score from per-utterance scores, weighted by cycle counts.
        """
        scores = [s for s in scores if s.cycles]
        if not scores:
            raise DataError("No detection scores with reference cycles to pool.")
        total = sum(s.cycles for s in scores)
        identified = sum(s.identified for s in scores)
        idr = sum(s.idr * s.cycles for s in scores) / total
        mr = sum(s.mr * s.cycles for s in scores) / total
        far = 100.0 - idr - mr
        if identified:
            bias = sum(s.bias * s.identified for s in scores) / identified
            second = sum((s.ida**2 + s.bias**2) * s.identified for s in scores)
            ida = math.sqrt(max(0.0, second / identified - bias**2))
        else:
            bias = ida = 0.0
        return cls(idr, mr, far, ida, total, identified, bias)

    def to_json(self) -> Dict[str, float]:
        """The rates and IDA as a JSON-safe dict."""
        return {"idr": self.idr, "mr": self.mr, "far": self.far, "ida_ms": self.ida}

    @classmethod
    def from_json(cls, data: Mapping[str, float]) -> "DetectionScore":
        """Reads a score written by `to_json`."""
        return cls(data["idr"], data["mr"], data["far"], data["ida_ms"])


def degg(egg: Waveform) -> Waveform:
    """
    First difference of the EGG scaled by the sampling rate. Sample `k` of the
    result belongs to time `(k + 0.5) / rate`.

    Raises:
        DataError: The EGG holds fewer than two samples.
    """
    if len(egg) < 2:
        raise DataError("EGG too short to differentiate: fewer than two samples.")
    return Waveform(np.diff(egg.samples) * egg.rate, egg.rate, "egg")


def detect_voicing(
    w: Waveform,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    fraction: float = 0.05,
    min_region_ms: float = 30.0,
    merge_gap_ms: float = 20.0,
) -> VoicingMask:
    """
    Energy-based voicing detection, usable on speech or EGG.

    Frames of `frame_ms` every `hop_ms` are voiced when their mean energy
    reaches `fraction` of the 95th percentile of all frame energies. Runs of
    voiced frames become regions; gaps shorter than `merge_gap_ms` are closed
    and regions shorter than `min_region_ms` are dropped.

    Args:
        w: The waveform.
        frame_ms: Frame length in milliseconds.
        hop_ms: Frame hop in milliseconds.
        fraction: Threshold relative to the robust maximum energy.
        min_region_ms: Shortest region kept.
        merge_gap_ms: Longest gap closed between regions.

    Returns:
        The voiced regions; empty for silence.

    Example:
        ```python
        from prefect_speech2egg.eggmetrics import detect_voicing

        mask = detect_voicing(egg)
        print(mask.regions)
        ```
    """
    if not len(w):
        raise DataError("Cannot detect voicing in an empty waveform.")
    frame = max(1, int(round(frame_ms * w.rate / 1000.0)))
    hop = max(1, int(round(hop_ms * w.rate / 1000.0)))
    power = w.samples**2
    if len(power) <= frame:
        energies = np.array([power.mean()])
    else:
        cumulative = np.concatenate([[0.0], np.cumsum(power)])
        starts = np.arange(0, len(power) - frame + 1, hop)
        energies = (cumulative[starts + frame] - cumulative[starts]) / frame
    robust = np.percentile(energies, PEAK_PERCENTILE)
    if robust <= 0:
        return VoicingMask()
    voiced = energies >= fraction * robust

    regions: List[List[float]] = []
    last = len(energies) - 1
    for index in np.flatnonzero(voiced):
        centre = (index * hop + 0.5 * min(frame, len(power))) / w.rate
        start = 0.0 if index == 0 else centre - 0.5 * hop / w.rate
        end = w.duration if index == last else centre + 0.5 * hop / w.rate
        if regions and start - regions[-1][1] < merge_gap_ms / 1000.0:
            regions[-1][1] = end
        else:
            regions.append([start, end])
    return VoicingMask(
        tuple(
            (max(0.0, s), min(w.duration, e))
            for s, e in regions
            if e - s >= min_region_ms / 1000.0
        )
    )


def _refine(values: np.ndarray, index: int) -> float:
    """Sub-sample offset of a peak from a parabola through its neighbours."""
    if index <= 0 or index >= len(values) - 1:
        return 0.0
    left, mid, right = values[index - 1], values[index], values[index + 1]
    curvature = left - 2.0 * mid + right
    if curvature == 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def _pick(
    side: np.ndarray,
    lo: int,
    hi: int,
    distance: int,
    rate: int,
    local: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Keeps the peaks of one dEGG side that clear the threshold within a region.

    The scale is the region's 95th-percentile peak height, or the running local
    maximum bounded below by a quarter of it when `local` is given.
    """
    segment = side[lo:hi]
    candidates, _ = find_peaks(segment, distance=distance)
    if not len(candidates):
        return np.zeros(0), np.zeros(0)
    scale = np.percentile(segment[candidates], PEAK_PERCENTILE)
    if local is not None:
        scale = np.maximum(local[lo:hi][candidates], REGION_FLOOR * scale)
    threshold = PEAK_ALPHA * scale
    peaks = candidates[(segment[candidates] > threshold) & (segment[candidates] > 0)]
    times = np.array([(lo + p + 0.5 + _refine(side, lo + p)) / rate for p in peaks])
    return times, segment[peaks]


def extract_epochs(
    egg: Waveform,
    voicing: Optional[VoicingMask] = None,
    source: EpochSource = "reference",
    min_period: float = MIN_PERIOD,
    max_period: float = MAX_PERIOD,
    local_span: Optional[float] = None,
) -> EpochSet:
    """
    Picks GCIs as negative and GOIs as positive dEGG peaks inside voiced regions.

    A peak counts when it exceeds 0.3 times the 95th-percentile peak height of
    the same dEGG side within its voiced region. With `local_span` set, the
    scale becomes the running maximum over +-`local_span` seconds, bounded below
    by a quarter of the region scale, which keeps weak cycles next to loud ones.
    Peaks are at least `min_period` apart and refined by parabolic
    interpolation. Each GCI keeps at most one GOI (the largest) before the next
    GCI, or within `max_period` after the last GCI of a region; GOIs before a
    region's first GCI are dropped.

    Args:
        egg: Polarity-normalized EGG.
        voicing: Voiced regions; detected from the EGG when omitted.
        source: Tag for the returned set.
        min_period: Minimum distance between peaks of one kind, seconds.
        max_period: Longest admissible glottal cycle, seconds.
        local_span: Half-width of the local peak scale in seconds; the
            region-wise scale is used when omitted.

    Returns:
        The epochs; empty for fully unvoiced input.
    """
    if voicing is None:
        voicing = detect_voicing(egg)
    if not len(voicing) or len(egg) < 3:
        return EpochSet(source=source)
    if local_span is not None and local_span <= 0:
        raise ConfigError(f"local_span must be positive; got {local_span}.")
    d = degg(egg).samples
    rate = egg.rate
    closing, opening = np.maximum(-d, 0.0), np.maximum(d, 0.0)
    local_closing = local_opening = None
    if local_span is not None:
        span = 2 * int(round(local_span * rate)) + 1
        local_closing = maximum_filter1d(closing, size=span, mode="constant")
        local_opening = maximum_filter1d(opening, size=span, mode="constant")
    distance = max(1, int(round(min_period * rate)))

    gcis: List[float] = []
    gois: List[float] = []
    for start, end in voicing:
        lo = max(0, int(math.ceil(start * rate - 0.5)))
        hi = min(len(d), int(math.floor(end * rate - 0.5)) + 1)
        if hi - lo < 3:
            continue
        region_gci, _ = _pick(closing, lo, hi, distance, rate, local_closing)
        candidates, heights = _pick(opening, lo, hi, distance, rate, local_opening)
        if not len(region_gci):
            continue
        bounds = np.append(region_gci, region_gci[-1] + max_period)
        for k in range(len(region_gci)):
            inside = (candidates > bounds[k]) & (candidates < bounds[k + 1])
            if np.any(inside):
                gois.append(float(candidates[inside][np.argmax(heights[inside])]))
        gcis.extend(float(t) for t in region_gci)
    return EpochSet(gci=tuple(gcis), goi=tuple(gois), source=source)


def _median_period(gci: np.ndarray, max_period: float) -> float:
    """Median reference period, ignoring gaps longer than `max_period`."""
    periods = np.diff(gci)
    periods = periods[periods <= max_period]
    return float(np.median(periods)) if len(periods) else max_period


def _gci_cycles(ref: np.ndarray, max_period: float) -> np.ndarray:
    """Cycle bounds around every reference GCI."""
    guard = 0.5 * _median_period(ref, max_period)
    gaps = np.diff(ref)
    left = np.concatenate([[-np.inf], gaps])
    right = np.concatenate([gaps, [np.inf]])
    lo = np.where(left <= max_period, ref - 0.5 * left, ref - guard)
    hi = np.where(right <= max_period, ref + 0.5 * right, ref + guard)
    return np.stack([lo, hi], axis=1)


def _goi_cycles(ref_goi: np.ndarray, ref_gci: np.ndarray, max_period: float):
    """Cycle bounds of every reference GOI, delimited by reference GCIs."""
    guard = 0.5 * _median_period(ref_gci, max_period)
    cycles = np.empty((len(ref_goi), 2))
    for index, t in enumerate(ref_goi):
        before = ref_gci[ref_gci <= t]
        after = ref_gci[ref_gci > t]
        close_before = len(before) and t - before[-1] <= max_period
        close_after = len(after) and after[0] - t <= max_period
        cycles[index, 0] = before[-1] if close_before else t - guard
        cycles[index, 1] = after[0] if close_after else t + guard
    return cycles


def score_detection(
    ref: EpochSet,
    est: EpochSet,
    kind: EpochKind = "gci",
    max_period: float = MAX_PERIOD,
) -> DetectionScore:
    """
    Scores estimated epochs against reference epochs cycle by cycle.

    For GCIs the cycle of a reference instant spans the midpoints to its
    neighbours; for GOIs it is the reference GCI-delimited cycle holding it.
    Ends and gaps longer than `max_period` use half the median reference
    period as guard. Cycles are half-open, so an estimate on a shared boundary
    belongs to the later cycle. A cycle holding exactly one estimate is
    identified, none is a miss, several a false alarm.

    Args:
        ref: Reference epochs.
        est: Estimated epochs.
        kind: `"gci"` or `"goi"`.
        max_period: Longest admissible glottal cycle, seconds.

    Returns:
        Percentages over reference cycles and the timing error spread in ms.

    Raises:
        DataError: The reference holds no instants of this kind.
    """
    reference = ref.instants(kind)
    estimate = np.sort(est.instants(kind))
    if not len(reference):
        raise DataError(f"Cannot score {kind} detection against an empty reference.")
    if kind == "gci":
        cycles = _gci_cycles(reference, max_period)
    else:
        cycles = _goi_cycles(reference, np.asarray(ref.gci), max_period)

    first = np.searchsorted(estimate, cycles[:, 0], side="left")
    last = np.searchsorted(estimate, cycles[:, 1], side="left")
    counts = last - first
    hits = counts == 1
    n = len(reference)
    idr = 100.0 * hits.sum() / n
    mr = 100.0 * (counts == 0).sum() / n
    far = 100.0 - idr - mr
    errors = 1000.0 * (estimate[first[hits]] - reference[hits])
    ida = float(np.std(errors)) if len(errors) else 0.0
    bias = float(np.mean(errors)) if len(errors) else 0.0
    return DetectionScore(
        float(idr), float(mr), float(far), ida, n, int(hits.sum()), bias
    )


def _open_phase_peak(egg: Waveform, goi: float, gci_next: float) -> Optional[float]:
    """Time of maximum opening between a GOI and the next GCI, if any."""
    rate = egg.rate
    lo = max(0, int(math.floor(goi * rate)) - 1)
    hi = min(len(egg), int(math.ceil(gci_next * rate)) + 2)
    if hi - lo < 4:
        return None
    t = np.arange(lo, hi) / rate
    spline = CubicSpline(t, egg.samples[lo:hi])
    roots = spline.derivative().roots(extrapolate=False)
    roots = roots[(roots > goi) & (roots < gci_next)]
    if not len(roots):
        return None
    return float(roots[np.argmax(spline(roots))])


def cycle_metrics(
    epochs: EpochSet, egg: Waveform, max_period: float = MAX_PERIOD
) -> CycleTable:
    """
    Contact, open and speed quotients of every cycle between consecutive GCIs.

    CQ is the GCI-to-GOI time over the period, OQ its complement and SQ the
    GOI-to-peak time over the peak-to-next-GCI time, where the peak (maximum
    opening) is the highest maximum of a cubic spline through the open phase.
    Cycles without a GOI or a peak are skipped and tallied; consecutive GCIs
    further apart than `max_period` do not form a cycle.

    Returns:
        The measured cycles and the skipped-cycle tally.
    """
    gci = np.asarray(epochs.gci)
    goi = np.asarray(epochs.goi)
    cycles: List[CycleMetrics] = []
    skipped = 0
    for start, end in zip(gci[:-1], gci[1:]):
        period = end - start
        if period > max_period:
            continue
        inside = goi[(goi > start) & (goi < end)]
        if not len(inside):
            skipped += 1
            continue
        opening = float(inside[0])
        peak = _open_phase_peak(egg, opening, end)
        if peak is None:
            skipped += 1
            continue
        cq = (opening - start) / period
        cycles.append(
            CycleMetrics(
                cycle_start=float(start),
                cycle_end=float(end),
                cq=float(cq),
                oq=float(1.0 - cq),
                sq=float((peak - opening) / (end - peak)),
            )
        )
    return CycleTable(tuple(cycles), skipped)


def _time_normalize(cycle: np.ndarray, length: int) -> np.ndarray:
    """Resamples a cycle onto `length` evenly spaced points."""
    if len(cycle) == length:
        return cycle
    return np.interp(
        np.linspace(0.0, 1.0, length, endpoint=False),
        np.linspace(0.0, 1.0, len(cycle), endpoint=False),
        cycle,
    )


def hnr(
    egg: Waveform,
    voicing: Optional[VoicingMask] = None,
    epochs: Optional[EpochSet] = None,
    max_period: float = MAX_PERIOD,
    ceiling: float = HNR_CEILING,
) -> float:
    """
    Harmonic-to-noise ratio of the EGG as a log10 energy ratio.

    In each voiced region the GCI-delimited cycles are brought to the median
    cycle length, averaged into one periodic template and the template is
    stretched back onto every cycle; the residual is the noise. Regions with
    fewer than 8 cycles are skipped and the rest are averaged weighted by their
    energy. Values are capped at `ceiling`.

    Args:
        egg: The EGG.
        voicing: Voiced regions; detected from the EGG when omitted.
        epochs: Epochs of the EGG; extracted when omitted.
        max_period: Longest admissible glottal cycle, seconds.
        ceiling: Upper bound of the returned value.

    Returns:
        `log10(E_periodic / E_noise)`.

    Raises:
        DataError: "insufficient cycles" when no region holds 8 cycles.
    """
    if voicing is None:
        voicing = detect_voicing(egg)
    if epochs is None:
        epochs = extract_epochs(egg, voicing)
    gci = np.asarray(epochs.gci)
    values, weights = [], []
    for start, end in voicing:
        marks = np.round(gci[(gci >= start) & (gci <= end)] * egg.rate).astype(int)
        longest = max_period * egg.rate
        pairs = [(a, b) for a, b in zip(marks[:-1], marks[1:]) if 0 < b - a <= longest]
        if len(pairs) < HNR_MIN_CYCLES:
            continue
        cycles = [egg.samples[a:b] for a, b in pairs]
        length = int(np.median([len(c) for c in cycles]))
        template = np.mean([_time_normalize(c, length) for c in cycles], axis=0)
        periodic = noise = 0.0
        for cycle in cycles:
            fitted = _time_normalize(template, len(cycle))
            periodic += float(np.sum(fitted**2))
            noise += float(np.sum((cycle - fitted) ** 2))
        if noise <= periodic * 10.0 ** (-ceiling):
            value = ceiling
        else:
            value = min(ceiling, math.log10(periodic / noise))
        values.append(value)
        weights.append(periodic + noise)
    if not values:
        raise DataError(
            f"insufficient cycles: no voiced region holds {HNR_MIN_CYCLES} cycles."
        )
    return float(np.average(values, weights=weights))


def window_l2(
    reference: Union[Waveform, np.ndarray],
    estimate: Union[Waveform, np.ndarray],
    window: int,
) -> float:
    """
    Mean per-window squared distance between two EGGs over consecutive
    windows of `window` samples. Each estimated window is first scaled by its
    least-squares gain onto the reference window.
    """
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.shape != est.shape:
        raise DataError(f"EGG lengths differ: {ref.shape} vs {est.shape}.")
    if window < 1 or len(ref) < window:
        raise DataError(f"Need at least one window of {window} samples.")
    count = len(ref) // window
    r = ref[: count * window].reshape(count, window)
    e = est[: count * window].reshape(count, window)
    energy = np.sum(e * e, axis=1)
    gain = np.divide(
        np.sum(e * r, axis=1), energy, out=np.zeros(count), where=energy > 0
    )
    return float(np.mean(np.mean((r - gain[:, None] * e) ** 2, axis=1)))


@dataclass(frozen=True)
class UtteranceMeasurement:
    """
    Everything measured on one EGG.
    """

    voicing: VoicingMask
    epochs: EpochSet
    cycles: CycleTable
    hnr: float


def measure_utterance(
    egg: Waveform,
    voicing: Optional[VoicingMask] = None,
    source: EpochSource = "reference",
) -> UtteranceMeasurement:
    """
    Voicing, epochs, cycle quotients and HNR of one EGG. An HNR that cannot be
    computed is NaN.
    """
    if voicing is None:
        voicing = detect_voicing(egg)
    epochs = extract_epochs(egg, voicing, source=source)
    try:
        ratio = hnr(egg, voicing, epochs)
    except DataError as exc:
        get_logger(__name__).debug(f"HNR unavailable: {exc}")
        ratio = math.nan
    return UtteranceMeasurement(voicing, epochs, cycle_metrics(epochs, egg), ratio)


def _nan_to_none(value: float) -> Optional[float]:
    """JSON has no NaN; store it as null."""
    return None if value is None or math.isnan(value) else float(value)


def _none_to_nan(value: Optional[float]) -> float:
    """Reads a null written by `_nan_to_none` back as NaN."""
    return math.nan if value is None else float(value)


@dataclass(frozen=True)
class MetricsReport:
    """
    Dataset-level comparison of reference and estimated EGG measurements.

    Attributes:
        dataset: Name of the dataset or condition.
        gci: Pooled GCI detection score.
        goi: Pooled GOI detection score.
        cq: (reference, estimated) mean contact quotient.
        oq: (reference, estimated) mean open quotient.
        sq: (reference, estimated) mean speed quotient.
        hnr: (reference, estimated) mean HNR.
        skipped_cycles: Cycles that could not be measured, both sides together.
        window_l2: Mean per-window L2 distance, when waveforms were compared.
        config: Snapshot of the configuration that produced the report.
    """

    dataset: str
    gci: DetectionScore
    goi: DetectionScore
    cq: Tuple[float, float]
    oq: Tuple[float, float]
    sq: Tuple[float, float]
    hnr: Tuple[float, float]
    skipped_cycles: int = 0
    window_l2: float = math.nan
    config: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        """JSON-safe dict of every metric and the configuration."""
        pairs = {
            name: {
                "true": _nan_to_none(getattr(self, name)[0]),
                "est": _nan_to_none(getattr(self, name)[1]),
            }
            for name in ("cq", "oq", "sq", "hnr")
        }
        return {
            "dataset": self.dataset,
            "gci": self.gci.to_json(),
            "goi": self.goi.to_json(),
            **pairs,
            "skipped_cycles": self.skipped_cycles,
            "window_l2": _nan_to_none(self.window_l2),
            "config": self.config,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "MetricsReport":
        """Reads a report written by `to_json`."""
        try:
            return cls(
                dataset=data["dataset"],
                gci=DetectionScore.from_json(data["gci"]),
                goi=DetectionScore.from_json(data["goi"]),
                skipped_cycles=int(data.get("skipped_cycles", 0)),
                window_l2=_none_to_nan(data.get("window_l2")),
                config=dict(data.get("config", {})),
                **{
                    name: (
                        _none_to_nan(data[name]["true"]),
                        _none_to_nan(data[name]["est"]),
                    )
                    for name in ("cq", "oq", "sq", "hnr")
                },
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"Malformed metrics report: missing {exc}.") from exc

    def save(self, path: Union[str, os.PathLike]) -> Path:
        """Writes the report as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    def row(self) -> Dict[str, float]:
        """The headline metrics as one table row."""
        return {
            "GCI IDR": self.gci.idr,
            "GCI MR": self.gci.mr,
            "GCI FAR": self.gci.far,
            "GCI IDA": self.gci.ida,
            "GOI IDR": self.goi.idr,
            "GOI MR": self.goi.mr,
            "GOI FAR": self.goi.far,
            "GOI IDA": self.goi.ida,
            "CQ true": self.cq[0],
            "CQ est": self.cq[1],
            "OQ true": self.oq[0],
            "OQ est": self.oq[1],
            "SQ true": self.sq[0],
            "SQ est": self.sq[1],
            "HNR true": self.hnr[0],
            "HNR est": self.hnr[1],
        }


def _mean(values: Sequence[float]) -> float:
    """Mean of the finite values, NaN when there are none."""
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def compare_reports(
    truth: Sequence[UtteranceMeasurement],
    est: Sequence[UtteranceMeasurement],
    dataset: str = "",
    window_l2: float = math.nan,
    config: Optional[Dict[str, Any]] = None,
) -> MetricsReport:
    """
    Builds the dataset-level report from matching per-utterance measurements
    of reference and estimated EGGs.

    Args:
        truth: Measurements of the reference EGGs.
        est: Measurements of the estimated EGGs, in the same order.
        dataset: Name recorded in the report.
        window_l2: Mean per-window L2 distance, when known.
        config: Configuration snapshot embedded in the report.

    Returns:
        Pooled detection scores and mean quotients for both sides.

    Raises:
        DataError: Empty or mismatched inputs, or no reference epochs at all.
    """
    if not truth or not est:
        raise DataError("Cannot compare empty measurement lists.")
    if len(truth) != len(est):
        raise DataError(f"{len(truth)} reference but {len(est)} estimated utterances.")
    gci_scores, goi_scores = [], []
    for ref, hyp in zip(truth, est):
        if ref.epochs.gci:
            gci_scores.append(score_detection(ref.epochs, hyp.epochs, "gci"))
        if ref.epochs.goi:
            goi_scores.append(score_detection(ref.epochs, hyp.epochs, "goi"))
    if not gci_scores:
        raise DataError(f"No reference GCIs in dataset {dataset!r}.")
    if goi_scores:
        goi = DetectionScore.pool(goi_scores)
    else:
        goi = DetectionScore(0.0, 100.0, 0.0, 0.0)

    def pair(name: str) -> Tuple[float, float]:
        """Mean of one quotient over the reference and the estimated cycles."""
        return tuple(
            _mean([getattr(c, name) for m in side for c in m.cycles])
            for side in (truth, est)
        )

    return MetricsReport(
        dataset=dataset,
        gci=DetectionScore.pool(gci_scores),
        goi=goi,
        cq=pair("cq"),
        oq=pair("oq"),
        sq=pair("sq"),
        hnr=(_mean([m.hnr for m in truth]), _mean([m.hnr for m in est])),
        skipped_cycles=sum(m.cycles.skipped for m in list(truth) + list(est)),
        window_l2=window_l2,
        config=dict(config or {}),
    )


def render_table(reports: Mapping[str, MetricsReport], digits: int = 2) -> str:
    """
    Aligned text table with one row per report (dataset or noise condition)
    and detection, quotient and HNR columns.
    """
    if not reports:
        raise DataError("No reports to render.")
    table = pd.DataFrame.from_dict(
        {key: report.row() for key, report in reports.items()}, orient="index"
    )
    return table.round(digits).to_string(na_rep="-")


def render_comparison_table(
    reports: Mapping[str, MetricsReport], digits: int = 2
) -> str:
    """
    Aligned text table comparing model variants (e.g. `cosine` and `l2`
    reconstruction) on the detection and quotient columns of one condition.
    """
    if not reports:
        raise DataError("No reports to compare.")
    columns = ["GCI IDR", "GCI MR", "GCI FAR", "GCI IDA", "GOI IDR", "CQ est", "SQ est"]
    table = pd.DataFrame.from_dict(
        {key: report.row() for key, report in reports.items()}, orient="index"
    )[columns]
    table.index.name = "loss"
    return table.round(digits).to_string(na_rep="-")
