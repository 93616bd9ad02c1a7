"""Small helpers shared across modules."""

import logging
from typing import Union

import numpy as np
from prefect.exceptions import MissingContextError
from prefect.logging import get_logger as get_prefect_logger
from prefect.logging import get_run_logger


def get_logger(name: str) -> Union[logging.Logger, logging.LoggerAdapter]:
    """
    Returns the run logger when called inside a flow or task run, so messages
    land in the run's log; otherwise a Prefect logger named after the module.

    Args:
        name: Module name used outside of runs.

    Returns:
        A logger or logger adapter.
    """
    try:
        return get_run_logger()
    except MissingContextError:
        return get_prefect_logger(name)


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """
    Derives an independent, reproducible seed from a base seed and a key path,
    e.g. `derive_seed(7, "utterance", 12)`.

    Args:
        seed: The base seed.
        *keys: Integers or strings identifying the consumer.

    Returns:
        A non-negative 63-bit integer seed.
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.extend(key.encode("utf-8"))
        else:
            entropy.append(int(key))
    sequence = np.random.SeedSequence(entropy)
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1
