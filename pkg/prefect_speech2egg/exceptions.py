"""Errors raised by prefect-speech2egg, each carrying the command-line exit code."""

from typing import Optional


class Speech2EggError(Exception):
    """
    Base class of all errors raised by the package.

    Attributes:
        exit_code: The process exit code the command line reports for this error.
    """

    exit_code: int = 1


class ConfigError(Speech2EggError, ValueError):
    """
    An invalid or unresolvable run configuration.
    """

    exit_code = 2


class DataError(Speech2EggError, ValueError):
    """
    Waveforms, manifests or checkpoints that cannot be used.
    """

    exit_code = 3


class CheckpointError(DataError):
    """
    A checkpoint that is missing entries or was written with another schema.
    """


class DivergenceError(Speech2EggError, RuntimeError):
    """
    Training produced a non-finite loss or gradient.

    Attributes:
        last_finite_step: The last step whose losses were all finite.
    """

    exit_code = 4

    def __init__(self, message: str, last_finite_step: Optional[int] = None):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class ProvenanceError(RuntimeError):
    """
    The discriminator was handed latents of the wrong origin.
    """
