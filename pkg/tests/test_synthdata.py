import json

import numpy as np
import pytest

from prefect_speech2egg.exceptions import ConfigError, DataError
from prefect_speech2egg.signal_io import load_manifest, load_waveform
from prefect_speech2egg.synthdata import (
    CorpusSpec,
    GlottalCycleSpec,
    SynthUtteranceTruth,
    load_truth,
    synth_babble,
    synth_corpus,
    synth_egg,
    synth_speech_from_egg,
    synth_utterance,
)


def test_cycle_phases_fill_the_period():
    cycle = GlottalCycleSpec(period=0.01, cq=0.4, sq=1.5)
    assert cycle.contact + cycle.opening + cycle.closing == pytest.approx(0.01)
    assert cycle.opening / cycle.closing == pytest.approx(1.5)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"period": 0.0, "cq": 0.5, "sq": 1.0}, "period"),
        ({"period": 0.01, "cq": 1.0, "sq": 1.0}, "cq"),
        ({"period": 0.01, "cq": 0.5, "sq": -1.0}, "sq"),
        ({"period": 0.01, "cq": 0.5, "sq": 1.0, "amplitude": 0.0}, "amplitude"),
    ],
)
def test_cycle_validation(kwargs, match):
    with pytest.raises(DataError, match=match):
        GlottalCycleSpec(**kwargs)


@pytest.fixture(scope="module")
def varied_run():
    cycles = [
        GlottalCycleSpec(period=1 / f0, cq=cq, sq=sq)
        for f0, cq, sq in zip(
            np.linspace(110, 160, 40), np.linspace(0.35, 0.55, 40), [1.3] * 40
        )
    ]
    egg, truth = synth_egg(cycles, rate=16000)
    return cycles, egg, truth


def test_truth_matches_cycle_controls(varied_run):
    cycles, _, truth = varied_run
    gci, goi = np.array(truth.gci), np.array(truth.goi)
    assert len(gci) == len(goi) == len(cycles)
    np.testing.assert_allclose(np.diff(gci), [c.period for c in cycles[:-1]])
    np.testing.assert_allclose(goi - gci, [c.contact for c in cycles])
    assert [cq for cq, _, _ in truth.per_cycle] == [c.cq for c in cycles]
    assert truth.voiced[0][0] == pytest.approx(0.02)


def test_gci_is_steepest_fall_and_goi_steepest_rise(varied_run):
    _, egg, truth = varied_run
    slopes = np.diff(egg.samples)
    rate = egg.rate
    for g, o in zip(truth.gci, truth.goi):
        lo, hi = int(g * rate) - 20, int(g * rate) + 20
        assert abs(lo + np.argmin(slopes[lo:hi]) + 0.5 - g * rate) <= 1.0
        lo, hi = int(o * rate) - 20, int(o * rate) + 20
        assert abs(lo + np.argmax(slopes[lo:hi]) + 0.5 - o * rate) <= 1.0


def test_silence_around_the_run(varied_run):
    _, egg, truth = varied_run
    start, end = truth.voiced[0]
    assert np.all(egg.samples[: int(start * egg.rate)] == 0.0)
    assert np.all(egg.samples[int(np.ceil(end * egg.rate)) + 1 :] == 0.0)
    assert np.max(np.abs(egg.samples)) <= 1.0


def test_truth_rejects_misordered_instants():
    with pytest.raises(DataError, match="follow its own GCI"):
        SynthUtteranceTruth(
            gci=(0.1, 0.2), goi=(0.1, 0.25), peak=(), voiced=(), per_cycle=()
        )
    with pytest.raises(DataError, match="strictly increasing"):
        SynthUtteranceTruth(
            gci=(0.2, 0.1), goi=(0.3, 0.4), peak=(), voiced=(), per_cycle=()
        )


def test_truth_json(tmp_path, varied_run):
    _, _, truth = varied_run
    path = truth.save(tmp_path / "truth.json")
    assert load_truth(path) == truth
    (tmp_path / "bad.json").write_text(json.dumps({"gci": []}))
    with pytest.raises(DataError, match="Malformed truth"):
        load_truth(tmp_path / "bad.json")


def test_speech_from_egg(varied_run):
    _, egg, _ = varied_run
    formants = [(700.0, 80.0), (1200.0, 90.0)]
    speech = synth_speech_from_egg(egg, formants, seed=5, aspiration_std=0.02)
    assert len(speech) == len(egg)
    assert speech.channel_role == "speech"
    again = synth_speech_from_egg(egg, formants, seed=5, aspiration_std=0.02)
    np.testing.assert_array_equal(speech.samples, again.samples)
    lead = speech.samples[: int(0.01 * egg.rate)]
    assert np.std(lead) == pytest.approx(0.02, rel=0.3)


def test_speech_from_egg_rejects_bad_formants(varied_run):
    _, egg, _ = varied_run
    with pytest.raises(DataError, match="Nyquist"):
        synth_speech_from_egg(egg, [(9000.0, 80.0)])
    with pytest.raises(DataError, match="bandwidth"):
        synth_speech_from_egg(egg, [(500.0, 0.0)])
    with pytest.raises(DataError, match="at least one formant"):
        synth_speech_from_egg(egg, [])


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"pitch_range": (300.0, 80.0)}, "inverted"),
        ({"cq_range": (0.3, 1.2)}, "cq_range"),
        ({"split_fractions": (0.5, 0.1, 0.1)}, "summing to 1"),
        ({"n_utterances": -1}, "utterances"),
    ],
)
def test_corpus_spec_validation(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        CorpusSpec(**kwargs)


def test_synth_utterance_is_reproducible(tiny_spec):
    first = synth_utterance(tiny_spec, 2)
    second = synth_utterance(tiny_spec, 2)
    other = synth_utterance(tiny_spec, 3)
    np.testing.assert_array_equal(first.speech.samples, second.speech.samples)
    np.testing.assert_array_equal(first.egg.samples, second.egg.samples)
    assert first.truth == second.truth
    assert len(first.egg) != len(other.egg) or not np.array_equal(
        first.egg.samples, other.egg.samples
    )


def test_synth_utterance_respects_ranges(tiny_spec):
    utterance = synth_utterance(tiny_spec, 0)
    lo, hi = tiny_spec.pitch_range
    periods = np.diff(utterance.truth.gci)
    within_runs = periods[periods < 1.0 / lo + 1e-9]
    assert np.all(within_runs >= 1.0 / hi - 1e-9)
    for cq, oq, sq in utterance.truth.per_cycle:
        assert tiny_spec.cq_range[0] <= cq <= tiny_spec.cq_range[1]
        assert tiny_spec.sq_range[0] <= sq <= tiny_spec.sq_range[1]
        assert cq + oq == pytest.approx(1.0)
    assert 1 <= len(utterance.truth.voiced) <= 2


def test_runs_of_an_utterance_share_one_voice():
    spec = CorpusSpec(voiced_segments=(3, 3), voiced_duration=(0.2, 0.3))
    for index in range(5):
        truth = synth_utterance(spec, index).truth
        periods = np.diff(truth.gci)
        periods = periods[periods < 0.02]
        assert periods.max() / periods.min() <= 1.45
        contact = np.array([cq for cq, _, _ in truth.per_cycle])
        assert np.ptp(contact) <= 0.05


def test_synth_babble():
    babble = synth_babble(rate=16000, duration=0.5, talkers=2, seed=1)
    assert len(babble) == 8000
    assert np.max(np.abs(babble.samples)) == pytest.approx(1.0)
    with pytest.raises(ConfigError, match="talker"):
        synth_babble(talkers=0)


def test_synth_corpus_layout(tiny_corpus):
    out_dir = tiny_corpus.parent
    manifest = load_manifest(tiny_corpus)
    assert [entry.id for entry in manifest.entries] == [
        f"syn{index:04d}" for index in range(8)
    ]
    assert len(manifest.split("train")) == 4
    assert len(manifest.split("val")) == 2
    assert len(manifest.split("test")) == 2
    assert (out_dir / "babble.wav").exists()
    for entry in manifest.entries:
        truth = load_truth(out_dir / "truth" / f"{entry.id}.json")
        assert truth.rate == 16000
        speech = load_waveform(entry.speech_path, "speech", normalize=False)
        egg = load_waveform(entry.egg_path, "egg", normalize=False)
        assert len(speech) == len(egg)
        assert truth.voiced[-1][1] * 16000 < len(egg)


def test_synth_corpus_is_deterministic(tmp_path, tiny_spec, tiny_corpus):
    synth_corpus(tiny_spec, tmp_path)
    for name in ("manifest.csv", "wav/syn0005_egg.wav", "truth/syn0005.json"):
        expected = (tiny_corpus.parent / name).read_bytes()
        assert (tmp_path / name).read_bytes() == expected


def test_synth_corpus_unwritable(tmp_path, tiny_spec):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DataError, match="Cannot create corpus directory"):
        synth_corpus(tiny_spec, blocker / "corpus")
