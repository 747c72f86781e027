"""EEG-conditioned time-domain speech extraction."""

import os as _os

# BASEN_THREADS caps BLAS worker pools (default 1 = reference mode, fully
# deterministic).  Must be exported before numpy first loads its BLAS, which
# is why this sits at the top of the package root.
_n = _os.environ.get("BASEN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, _n)

from .model import (  # noqa: E402
    BasenConfig,
    BasenModel,
    ModelError,
    desk_config,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .signal_core import (  # noqa: E402
    MultiChannelSeries,
    SampleBuffer,
    SignalError,
    read_matrix,
    read_wav,
    write_matrix,
    write_wav,
)
from .eeg_preprocess import BandSpec, MUAConfig, mua  # noqa: E402
from .training import (  # noqa: E402
    SyntheticExample,
    SyntheticTaskConfig,
    TrainConfig,
    TrainingError,
    ablation_run,
    build_dataset,
    evaluate,
    make_synthetic_example,
    mean_si_sdr,
    si_sdr,
    si_sdr_loss,
    train,
)

__all__ = [
    "BandSpec", "BasenConfig", "BasenModel", "ModelError", "MUAConfig",
    "MultiChannelSeries", "SampleBuffer", "SignalError", "SyntheticExample",
    "SyntheticTaskConfig", "TrainConfig", "TrainingError", "ablation_run",
    "build_dataset", "desk_config", "evaluate", "load_checkpoint",
    "make_synthetic_example", "mean_si_sdr", "mua", "read_matrix", "read_wav",
    "save_checkpoint", "si_sdr", "si_sdr_loss", "tiny_config", "train",
    "write_matrix", "write_wav",
]
