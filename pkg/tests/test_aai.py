import math
from dataclasses import replace

import numpy as np
import pytest

from prefect_speech2egg.aai import (
    AAIModel,
    Architecture,
    LatentBatch,
    TrainLog,
    TrainRecord,
    TrainSettings,
    discriminator_update,
    elbo_report,
    from_checkpoint,
    infer,
    sample_prior,
    to_checkpoint,
    train_aai,
    train_prior,
    validation_cosine,
)
from prefect_speech2egg.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    ProvenanceError,
)
from prefect_speech2egg.neuralcore import (
    RECONSTRUCTION_LOSSES,
    TrainState,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from prefect_speech2egg.preprocess import frame, frame_many
from prefect_speech2egg.signal_io import UtterancePair, Waveform
from prefect_speech2egg.synthdata import GlottalCycleSpec, synth_egg, synth_utterance
from prefect_speech2egg.utilities import derive_seed

ARCHITECTURE = Architecture(
    window_len=64, encoder_widths=(32, 16), latent_dim=4, discriminator_widths=(8,)
)
SETTINGS = TrainSettings(
    steps=10,
    batch_size=16,
    k_inner=2,
    lr=1e-3,
    val_every=5,
    log_every=5,
    patience=1000,
    seed=3,
)


@pytest.fixture(scope="module")
def frames(tiny_spec):
    pairs = []
    for index in range(4):
        utterance = synth_utterance(tiny_spec, index)
        pairs.append(UtterancePair(utterance.speech, utterance.egg, f"u{index}"))
    return frame_many(pairs, window_ms=4.0, stride=16).without_silent_targets()


@pytest.fixture(scope="module")
def prior(frames):
    prior, _ = train_prior(frames, replace(SETTINGS, steps=20), ARCHITECTURE)
    return prior


@pytest.fixture(scope="module")
def held_out(tiny_spec):
    pairs = []
    for index in range(4, 6):
        utterance = synth_utterance(tiny_spec, index)
        pairs.append(UtterancePair(utterance.speech, utterance.egg, f"u{index}"))
    return frame_many(pairs, window_ms=4.0, stride=16).without_silent_targets()


def _one_frame(frames, index=0):
    speech, egg = frames.batch(np.array([index]))
    pair = UtterancePair(
        Waveform(speech[0], 16000),
        Waveform(egg[0], 16000, channel_role="egg"),
        "one",
    )
    return frame(pair, window_ms=4.0)


def _assert_same_net(left, right):
    left_arrays, right_arrays = left.state_dict(), right.state_dict()
    assert left_arrays.keys() == right_arrays.keys()
    for key, array in left_arrays.items():
        np.testing.assert_array_equal(array, right_arrays[key], err_msg=key)


def test_train_prior_log(frames):
    settings = replace(SETTINGS, steps=60, val_every=20)
    prior, log = train_prior(frames, settings, ARCHITECTURE, val_dataset=frames)
    assert prior.latent_dim == 4
    assert prior.window_len == 64
    assert [record.step for record in log.records] == list(range(1, 61))
    validated = [r.step for r in log.records if not math.isnan(r.val_cosine)]
    assert validated == [20, 40, 60]
    assert log.discriminator_steps() == []
    first = np.mean([r.recon for r in log.records[:5]])
    last = np.mean([r.recon for r in log.records[-5:]])
    assert last < first


def test_train_prior_rejects_mismatched_frames(frames):
    wide = replace(ARCHITECTURE, window_len=96)
    with pytest.raises(DataError, match="networks expect 96"):
        train_prior(frames, SETTINGS, wide)


def test_prior_overfits_one_frame(frames):
    single = _one_frame(frames)
    assert len(single) == 1
    settings = replace(SETTINGS, steps=500, lr=5e-3, log_every=100)
    _, log = train_prior(single, settings, ARCHITECTURE)
    assert np.mean([record.recon for record in log.records[-10:]]) < 0.05


def test_zero_steps_keep_the_initialization(frames, prior):
    settings = replace(SETTINGS, steps=0)
    fresh, log = train_prior(frames, settings, ARCHITECTURE)
    assert len(log) == 0
    _assert_same_net(
        fresh.egg_encoder, ARCHITECTURE.encoder(derive_seed(3, "egg_enc"), "egg_enc")
    )
    _assert_same_net(
        fresh.egg_decoder, ARCHITECTURE.decoder(derive_seed(3, "egg_dec"), "egg_dec")
    )

    model, log, state = train_aai(frames, prior, settings, ARCHITECTURE)
    assert len(log) == 0
    assert state.step == 0
    _assert_same_net(
        model.speech_encoder,
        ARCHITECTURE.encoder(derive_seed(3, "speech_enc"), "speech_enc"),
    )
    _assert_same_net(model.egg_decoder, prior.egg_decoder)
    _assert_same_net(
        model.discriminator, ARCHITECTURE.discriminator(derive_seed(3, "disc"))
    )


def test_discriminator_schedule(frames, prior):
    settings = replace(SETTINGS, steps=12, k_inner=3)
    _, log, state = train_aai(frames, prior, settings, ARCHITECTURE)
    assert state.step == 12
    assert log.discriminator_steps() == [3, 6, 9, 12]
    assert log.inner_steps_per_update() == [3, 3, 3, 3]
    assert all(count == 4 for key, count in state.counts.items() if "disc" in key)
    assert all(
        count == 12 for key, count in state.counts.items() if "disc" not in key
    )
    assert math.isnan(log.records[0].disc)
    assert np.isfinite(log.records[-1].disc)


def test_discriminator_checks_provenance(prior):
    disc = ARCHITECTURE.discriminator(seed=0)
    state = TrainState(nets={"disc": disc})
    real = LatentBatch(np.zeros((4, 4)), "egg_prior")
    fake = LatentBatch(np.ones((4, 4)), "speech_encoder")
    assert np.isfinite(discriminator_update(disc, state, real, fake, SETTINGS))
    assert state.step == 0
    with pytest.raises(ProvenanceError, match="Real latents"):
        discriminator_update(disc, state, fake, fake, SETTINGS)
    with pytest.raises(ProvenanceError, match="Fake latents"):
        discriminator_update(disc, state, real, real, SETTINGS)


def test_sample_prior(frames, prior):
    batch = frames.egg_windows(np.arange(8))
    latents = sample_prior(prior, batch)
    assert latents.source == "egg_prior"
    assert latents.values.shape == (8, 4)
    np.testing.assert_array_equal(sample_prior(prior, batch).values, latents.values)
    with pytest.raises(ValueError, match="width 64"):
        sample_prior(prior, np.zeros((8, 32)))


def _family_windows(cq):
    cycles = [GlottalCycleSpec(period=0.008, cq=cq, sq=1.2, amplitude=0.9)] * 12
    egg, truth = synth_egg(cycles, 16000)
    starts = [
        int(round(t * 16000)) + offset
        for t in truth.gci[3:9]
        for offset in (0, 2, 4, 6)
    ]
    return np.stack([egg.samples[s : s + 64] for s in starts])


def _mean_distance(left, right):
    gaps = left[:, None, :] - right[None, :, :]
    return float(np.mean(np.linalg.norm(gaps, axis=-1)))


def test_sample_prior_separates_contact_quotients(prior):
    low = sample_prior(prior, _family_windows(0.3)).values
    high = sample_prior(prior, _family_windows(0.6)).values
    within = 0.5 * (_mean_distance(low, low) + _mean_distance(high, high))
    assert _mean_distance(low, high) > within


def test_resume_matches_uninterrupted_run(tmp_path, frames, prior):
    straight, _, _ = train_aai(frames, prior, SETTINGS, ARCHITECTURE)

    partial_settings = replace(SETTINGS, steps=6)
    partial, log, state = train_aai(frames, prior, partial_settings, ARCHITECTURE)
    assert len(log) == 6
    path = save_checkpoint(
        to_checkpoint(prior, partial, state), tmp_path / "checkpoint.npz"
    )
    resumed, rest, state = train_aai(
        frames, prior, SETTINGS, ARCHITECTURE, resume=load_checkpoint(path)
    )
    assert [record.step for record in rest.records] == [7, 8, 9, 10]
    assert state.step == 10

    batch = frames.speech_windows(np.arange(32))
    np.testing.assert_array_equal(resumed.predict(batch), straight.predict(batch))


def test_resume_needs_the_model(tmp_path, frames, prior):
    path = save_checkpoint(to_checkpoint(prior, stage="prior"), tmp_path / "p.npz")
    with pytest.raises(CheckpointError, match="Cannot resume"):
        train_aai(frames, prior, SETTINGS, ARCHITECTURE, resume=load_checkpoint(path))


def _regression_baseline(frames, decoder, settings):
    encoder = ARCHITECTURE.encoder(
        derive_seed(settings.seed, "speech_enc"), "speech_enc"
    )
    state = TrainState(nets={"speech_enc": encoder, "dec": decoder})
    _, loss_grad = RECONSTRUCTION_LOSSES["cosine"]
    for step in range(1, settings.steps + 1):
        rng = np.random.default_rng(derive_seed(settings.seed, "regression", step))
        x, y = frames.batch(rng.integers(len(frames), size=settings.batch_size))
        y_hat = decoder.forward(encoder.forward(x, mode="train"), mode="train")
        decoder_grads, grad_z = decoder.backward(loss_grad(y_hat, y))
        encoder_grads, _ = encoder.backward(grad_z)
        optimizer_step(
            state,
            {**encoder_grads, **decoder_grads},
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
        )
    return AAIModel(encoder, decoder, ARCHITECTURE.discriminator(seed=0))


def test_without_adversary_matches_plain_regression(frames, held_out, prior):
    settings = replace(SETTINGS, steps=200, k_inner=1, lambda_adv=0.0, noise_std=0.0)
    model, _, _ = train_aai(frames, prior, settings, ARCHITECTURE)
    baseline = _regression_baseline(
        frames, prior.egg_decoder.copy(name="dec"), settings
    )
    speech, egg = held_out.batch(np.arange(len(held_out)))
    ours = validation_cosine(model.predict, speech, egg)
    plain = validation_cosine(baseline.predict, speech, egg)
    assert ours <= 1.2 * plain


def test_input_noise_keeps_clean_validation(frames, held_out, prior):
    settings = replace(SETTINGS, steps=200)
    speech, egg = held_out.batch(np.arange(len(held_out)))
    noisy, _, _ = train_aai(frames, prior, settings, ARCHITECTURE)
    clean, _, _ = train_aai(
        frames, prior, replace(settings, noise_std=0.0), ARCHITECTURE
    )
    with_noise = validation_cosine(noisy.predict, speech, egg)
    without_noise = validation_cosine(clean.predict, speech, egg)
    assert with_noise <= 1.1 * without_noise


def test_early_stop_returns_best_networks(frames, prior):
    settings = replace(SETTINGS, steps=40, val_every=1, patience=1, lr=0.05)
    model, log, _ = train_aai(frames, prior, settings, ARCHITECTURE, frames)
    assert len(log) < 40
    speech, egg = frames.batch(np.arange(len(frames)))
    assert validation_cosine(model.predict, speech, egg) == log.best_val_cosine


def test_early_stop_restores_the_optimizer_state(frames, prior):
    settings = replace(SETTINGS, steps=40, val_every=1, patience=1, lr=0.05)
    model, log, state = train_aai(frames, prior, settings, ARCHITECTURE, frames)
    best = min(
        (r for r in log.records if not math.isnan(r.val_cosine)),
        key=lambda r: r.val_cosine,
    )
    assert state.step == best.step < log.records[-1].step
    assert model.speech_encoder is state.nets["speech_enc"]
    assert all(
        count == best.step
        for key, count in state.counts.items()
        if not key.startswith("disc/")
    )
    assert all(
        count == best.step // settings.k_inner
        for key, count in state.counts.items()
        if key.startswith("disc/")
    )


def test_divergence_is_reported(frames, prior):
    settings = replace(SETTINGS, steps=20, loss="l2", lr=1e300)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train_aai(frames, prior, settings, ARCHITECTURE)
    assert info.value.last_finite_step is not None
    assert 0 <= info.value.last_finite_step < 20


def test_latent_width_must_match_prior(frames, prior):
    wider = replace(ARCHITECTURE, latent_dim=8)
    with pytest.raises(ConfigError, match="latents"):
        train_aai(frames, prior, SETTINGS, wider)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"loss": "l1"}, "Unknown reconstruction loss"),
        ({"batch_size": 1}, "at least 2"),
        ({"k_inner": 0}, "k_inner"),
        ({"lr": 0.0}, "lr > 0"),
    ],
)
def test_train_settings_validation(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        TrainSettings(**kwargs)


class _Identity:
    window_len = 8

    def predict(self, windows):
        return windows.copy()


def test_infer_overlap_average_is_exact():
    speech = Waveform(np.random.default_rng(0).normal(size=203), 16000)
    estimate = infer(_Identity(), speech, stride=5)
    assert estimate.rate == 16000
    assert estimate.channel_role == "egg"
    np.testing.assert_array_equal(estimate.samples, speech.samples)


def test_infer_edge_cases():
    with pytest.raises(DataError, match="utterance too short"):
        infer(_Identity(), Waveform(np.ones(7), 16000))
    with pytest.raises(ConfigError, match="stride"):
        infer(_Identity(), Waveform(np.ones(20), 16000), stride=0)
    exact = infer(_Identity(), Waveform(np.arange(1.0, 9.0), 16000))
    np.testing.assert_array_equal(exact.samples, np.arange(1.0, 9.0))


class _Constant:
    window_len = 8

    def predict(self, windows):
        return np.full(windows.shape, 0.37)


def test_infer_constant_model():
    speech = Waveform(np.random.default_rng(4).normal(size=101), 16000)
    estimate = infer(_Constant(), speech)
    np.testing.assert_allclose(estimate.samples, 0.37, rtol=1e-12)


def test_infer_with_trained_model(frames, prior):
    model, _, _ = train_aai(frames, prior, SETTINGS, ARCHITECTURE)
    speech = Waveform(np.random.default_rng(1).normal(size=500), 16000)
    estimate = infer(model, speech, stride=8, batch_size=7)
    assert len(estimate) == 500
    assert np.all(np.isfinite(estimate.samples))


def test_elbo_report(frames, prior):
    model, _, _ = train_aai(frames, prior, SETTINGS, ARCHITECTURE)
    speech, egg = frames.batch(np.arange(16))
    report = elbo_report(model, prior, speech, egg, lambda_adv=0.5)
    parts = report.components
    assert set(parts) == {"reconstruction", "adversarial", "elbo"}
    assert report.scalar == pytest.approx(
        -parts["reconstruction"] - 0.5 * parts["adversarial"]
    )
    assert parts["adversarial"] > 0


def test_elbo_without_adversary_is_minus_reconstruction(frames, prior):
    model, _, _ = train_aai(frames, prior, SETTINGS, ARCHITECTURE)
    speech, egg = frames.batch(np.arange(16))
    report = elbo_report(model, prior, speech, egg, lambda_adv=0.0)
    assert report.scalar == -report.components["reconstruction"]


def test_elbo_report_with_silent_target(frames, prior):
    model, _, _ = train_aai(frames, prior, SETTINGS, ARCHITECTURE)
    speech, egg = frames.batch(np.arange(16))
    egg[3] = 0.0
    report = elbo_report(model, prior, speech, egg)
    assert np.isfinite(report.scalar)
    assert report.components["reconstruction"] == pytest.approx(
        validation_cosine(model.predict, speech, egg)
    )


def test_checkpoint_glue(tmp_path, frames, prior):
    model, _, state = train_aai(frames, prior, SETTINGS, ARCHITECTURE)
    checkpoint = to_checkpoint(prior, model, state, config={"seed": 3})
    assert checkpoint.meta == {"stage": "aai"}
    assert checkpoint.step == 10
    restored_prior, restored = from_checkpoint(
        load_checkpoint(save_checkpoint(checkpoint, tmp_path / "c.npz"))
    )
    assert isinstance(restored, AAIModel)
    batch = frames.speech_windows(np.arange(8))
    np.testing.assert_array_equal(restored.predict(batch), model.predict(batch))
    only_prior = from_checkpoint(to_checkpoint(prior, stage="prior"))
    assert only_prior[1] is None
    assert only_prior[0].latent_dim == restored_prior.latent_dim


def test_train_log_csv(tmp_path):
    log = TrainLog()
    for step in range(1, 7):
        log.append(
            TrainRecord(
                step=step,
                recon=1.0 / step,
                gen=0.7,
                disc=1.3,
                val_cosine=0.5 if step == 6 else math.nan,
                disc_update=step % 2 == 0,
            )
        )
    with pytest.raises(ValueError, match="does not follow"):
        log.append(TrainRecord(step=6, recon=0.0, gen=0.0, disc=0.0))
    path = log.to_csv(tmp_path / "train_log.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "step,recon,gen,disc,val_cosine"
    assert lines[1].startswith("1,1.0,0.7,1.3,")
    assert lines[1].endswith(",")
    restored = TrainLog.from_csv(path, k_inner=2)
    assert restored.discriminator_steps() == [2, 4, 6]
    assert restored.last_val_cosine == 0.5
    assert TrainLog.from_csv(path).discriminator_steps() == []
    (tmp_path / "other.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="has columns"):
        TrainLog.from_csv(tmp_path / "other.csv")
