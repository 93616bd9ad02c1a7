import numpy as np
import pytest
import soundfile as sf

from prefect_speech2egg.exceptions import DataError
from prefect_speech2egg.signal_io import (
    DatasetManifest,
    ManifestEntry,
    UtterancePair,
    Waveform,
    load_manifest,
    load_pair,
    load_stereo_pair,
    load_waveform,
    peak_normalize,
    resample,
    save_waveform,
    write_manifest,
)


def _tone(rate=16000, seconds=0.5, frequency=200.0, amplitude=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return amplitude * np.sin(2 * np.pi * frequency * t)


def test_waveform_rejects_bad_samples():
    with pytest.raises(DataError, match="1-D"):
        Waveform(np.zeros((2, 3)), 16000)
    with pytest.raises(DataError, match="non-finite"):
        Waveform(np.array([0.0, np.nan]), 16000)
    with pytest.raises(DataError, match="positive"):
        Waveform(np.zeros(3), 0)


def test_pair_requires_matching_channels():
    speech = Waveform(np.ones(10), 16000, "speech")
    with pytest.raises(DataError, match="EGG at 8000"):
        UtterancePair(speech, Waveform(np.ones(10), 8000, "egg"), "u1")
    with pytest.raises(DataError, match="9 EGG samples"):
        UtterancePair(speech, Waveform(np.ones(9), 16000, "egg"), "u1")


def test_float_wav_preserves_samples(tmp_path):
    samples = _tone().astype(np.float32).astype(np.float64)
    path = save_waveform(Waveform(samples, 16000, "egg"), tmp_path / "egg.wav")
    loaded = load_waveform(path, "egg", target_rate=None, normalize=False)
    assert loaded.rate == 16000
    assert loaded.channel_role == "egg"
    np.testing.assert_array_equal(loaded.samples, samples)


def test_pcm16_within_quantization(tmp_path):
    samples = _tone(amplitude=0.9)
    path = save_waveform(Waveform(samples, 16000), tmp_path / "speech.wav", 16)
    loaded = load_waveform(path, "speech", target_rate=None, normalize=False)
    assert np.max(np.abs(loaded.samples - samples)) <= 2.0**-15


def test_unsupported_bit_depth(tmp_path):
    with pytest.raises(DataError, match="bit depth"):
        save_waveform(Waveform(_tone(), 16000), tmp_path / "x.wav", 8)


def test_load_waveform_normalizes_peak(tmp_path):
    path = save_waveform(Waveform(_tone(amplitude=0.25), 16000), tmp_path / "s.wav")
    loaded = load_waveform(path, "speech")
    assert np.max(np.abs(loaded.samples)) == pytest.approx(1.0)


def test_load_waveform_zero_energy(tmp_path):
    path = save_waveform(Waveform(np.zeros(800), 16000), tmp_path / "silent.wav")
    with pytest.raises(DataError, match="zero-energy"):
        load_waveform(path, "speech")


def test_load_waveform_requires_channel_for_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    sf.write(str(path), np.stack([_tone(), _tone(frequency=120.0)], axis=1), 16000)
    with pytest.raises(DataError, match="declare which one"):
        load_waveform(path, "speech")
    with pytest.raises(DataError, match="Channel 2"):
        load_waveform(path, "speech", channel=2)


def test_load_waveform_rejects_non_wav(tmp_path):
    path = tmp_path / "notes.wav"
    path.write_text("not a waveform")
    with pytest.raises(DataError, match="Cannot read waveform"):
        load_waveform(path, "speech")


def test_load_waveform_rejects_other_formats(tmp_path):
    path = tmp_path / "tone.flac"
    sf.write(str(path), _tone(), 16000, format="FLAC")
    with pytest.raises(DataError, match="RIFF/WAVE"):
        load_waveform(path, "speech")


def test_resample_keeps_duration_and_tone():
    w = Waveform(_tone(rate=48000, seconds=1.0), 48000)
    down = resample(w, 16000)
    assert down.rate == 16000
    assert len(down) == 16000
    middle = down.samples[2000:-2000]
    assert np.max(np.abs(middle)) == pytest.approx(0.5, abs=0.01)
    assert resample(down, 16000) is down


def test_peak_normalize():
    w = peak_normalize(Waveform(np.array([0.0, -0.5, 0.25]), 16000))
    np.testing.assert_allclose(w.samples, [0.0, -1.0, 0.5])


def test_load_pair_resamples_and_trims(tmp_path):
    speech_path = save_waveform(
        Waveform(_tone(rate=32000, seconds=0.5), 32000), tmp_path / "a_speech.wav"
    )
    egg_path = save_waveform(
        Waveform(_tone(seconds=0.4, frequency=150.0), 16000), tmp_path / "a_egg.wav"
    )
    pair = load_pair(speech_path, egg_path, target_rate=16000)
    assert pair.id == "a_speech"
    assert pair.rate == 16000
    assert len(pair.speech) == len(pair.egg) == 6400
    assert pair.speech.channel_role == "speech"
    assert pair.egg.channel_role == "egg"


def test_load_stereo_pair(tmp_path):
    path = tmp_path / "take.wav"
    speech, egg = _tone(), _tone(frequency=120.0, amplitude=0.3)
    sf.write(str(path), np.stack([speech, egg], axis=1), 16000, subtype="FLOAT")
    pair = load_stereo_pair(path)
    assert pair.id == "take"
    np.testing.assert_allclose(
        pair.egg.samples, egg / np.max(np.abs(egg)), atol=1e-6
    )


@pytest.fixture
def manifest_dir(tmp_path):
    wav = tmp_path / "wav"
    wav.mkdir()
    entries = []
    for index, split in enumerate(["train", "train", "val", "test"]):
        speech = save_waveform(Waveform(_tone(), 16000), wav / f"u{index}_speech.wav")
        egg = save_waveform(Waveform(_tone(), 16000, "egg"), wav / f"u{index}_egg.wav")
        entries.append(ManifestEntry(f"u{index}", speech, egg, split))
    write_manifest(DatasetManifest(tuple(entries)), tmp_path / "manifest.csv")
    return tmp_path


def test_manifest_paths_are_relative(manifest_dir):
    text = (manifest_dir / "manifest.csv").read_text()
    assert text.splitlines()[0] == "id,speech_path,egg_path,split"
    assert "wav/u0_speech.wav" in text
    assert str(manifest_dir) not in text


def test_load_manifest(manifest_dir):
    manifest = load_manifest(manifest_dir / "manifest.csv")
    assert len(manifest) == 4
    assert [entry.id for entry in manifest.split("train")] == ["u0", "u1"]
    assert [entry.id for entry in manifest.split("test")] == ["u3"]
    assert manifest.entries[2].speech_path == manifest_dir / "wav" / "u2_speech.wav"


def _rewrite(path, old, new):
    path.write_text(path.read_text().replace(old, new, 1))


def test_load_manifest_duplicate_id(manifest_dir):
    path = manifest_dir / "manifest.csv"
    _rewrite(path, "u1,", "u0,")
    with pytest.raises(DataError, match="duplicate id 'u0'"):
        load_manifest(path)


def test_load_manifest_unknown_split(manifest_dir):
    path = manifest_dir / "manifest.csv"
    _rewrite(path, ",val", ",dev")
    with pytest.raises(DataError, match="unknown split tag 'dev'"):
        load_manifest(path)


def test_load_manifest_missing_file(manifest_dir):
    (manifest_dir / "wav" / "u3_egg.wav").unlink()
    with pytest.raises(DataError, match="missing file"):
        load_manifest(manifest_dir / "manifest.csv")


def test_load_manifest_bad_header(manifest_dir):
    path = manifest_dir / "manifest.csv"
    _rewrite(path, "split", "partition")
    with pytest.raises(DataError, match="must have header"):
        load_manifest(path)


def test_load_manifest_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        load_manifest(tmp_path / "nowhere.csv")
