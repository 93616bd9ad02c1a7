import logging

import pytest
from prefect.testing.utilities import prefect_test_harness

from prefect_speech2egg.commands import cmd_synth, cmd_train
from prefect_speech2egg.config import RunConfig
from prefect_speech2egg.synthdata import CorpusSpec, synth_corpus


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run the desk-scale training tests.",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run; pass --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True, scope="session")
def prefect_db():
    with prefect_test_harness():
        yield


@pytest.fixture(scope="function")
def prefect_caplog(caplog):
    logger = logging.getLogger("prefect")

    # TODO: Determine a better pattern for this and expose for all tests
    logger.propagate = True

    try:
        yield caplog
    finally:
        logger.propagate = False


@pytest.fixture(scope="function")
def prefect_task_runs_caplog(prefect_caplog):
    logger = logging.getLogger("prefect.task_runs")

    # TODO: Determine a better pattern for this and expose for all tests
    logger.propagate = True

    try:
        yield prefect_caplog
    finally:
        logger.propagate = False


TINY_SYNTH = {
    "n_utterances": 8,
    "voiced_segments": [1, 2],
    "voiced_duration": [0.2, 0.3],
    "unvoiced_duration": [0.05, 0.08],
    "split_fractions": [0.5, 0.25, 0.25],
    "babble_talkers": 2,
    "babble_duration": 1.0,
}

TINY_SETTINGS = {
    "seed": 3,
    "window_ms": 4.0,
    "train_stride": 32,
    "infer_stride": 8,
    "encoder_widths": [32, 16],
    "latent_dim": 4,
    "discriminator_widths": [8],
    "batch_size": 16,
    "prior_steps": 20,
    "aai_steps": 20,
    "val_every": 10,
    "log_every": 10,
    "patience": 1000,
    "sweep": {"kinds": ["white"], "snrs": [10.0]},
}


def tiny_run_config(data_dir):
    """
    A configuration small enough to run every flow in seconds.
    """
    return RunConfig().with_overrides(
        data_dir=data_dir, synth=TINY_SYNTH, **TINY_SETTINGS
    )


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_run_config(tmp_path / "data")


@pytest.fixture(scope="session")
def trained_run(prefect_db, tmp_path_factory):
    config = tiny_run_config(tmp_path_factory.mktemp("trained") / "data")
    cmd_synth(config)
    cmd_train(config)
    return config


@pytest.fixture(scope="session")
def tiny_spec():
    return CorpusSpec(
        n_utterances=8,
        seed=3,
        voiced_segments=(1, 2),
        voiced_duration=(0.2, 0.3),
        unvoiced_duration=(0.05, 0.08),
        split_fractions=(0.5, 0.25, 0.25),
        babble_talkers=2,
        babble_duration=1.0,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_spec):
    out_dir = tmp_path_factory.mktemp("corpus")
    synth_corpus(tiny_spec, out_dir)
    return out_dir / "manifest.csv"
