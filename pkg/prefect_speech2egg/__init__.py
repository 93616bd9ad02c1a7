from importlib.metadata import PackageNotFoundError, version

from .config import RunConfig  # noqa
from .commands import (  # noqa
    ExperimentResult,
    cmd_eval,
    cmd_infer,
    cmd_report,
    cmd_synth,
    cmd_train,
)
from .aai import (  # noqa
    AAIModel,
    PriorModel,
    TrainLog,
    TrainSettings,
    infer,
    train_aai,
    train_prior,
)
from .eggmetrics import (  # noqa
    MetricsReport,
    extract_epochs,
    measure_utterance,
    score_detection,
)
from .exceptions import (  # noqa
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    Speech2EggError,
)
from .signal_io import Waveform, load_manifest, load_pair, load_waveform  # noqa
from .synthdata import synth_corpus  # noqa

try:
    __version__ = version("prefect-speech2egg")
except PackageNotFoundError:
    __version__ = "0+unknown"
