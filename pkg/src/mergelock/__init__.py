"""Function-preserving protection of transformer checkpoints against model merging."""

__version__ = "0.1.0"

from .analysis import (
    AnalysisReport,
    frobenius_report,
    lambda_sweep,
    lmc_curve,
    merge_eval,
    parameter_distance,
)
from .attack import diagonal_align, diagonal_align_qk, hungarian_align_mlp, kabsch_align, params_align
from .checkpoint import (
    Checkpoint,
    MergeLockKey,
    ModelConfig,
    TaskVector,
    fingerprint,
    read_batch,
    read_checkpoint,
    read_key,
    task_vector,
    write_batch,
    write_checkpoint,
    write_key,
)
from .errors import MergeLockError
from .merge import merge, task_arithmetic, ties_merge, weight_average
from .protect import SamplingConfig, protect, protect_mergelock, protect_params, recover
from .rng import Rng
from .synth import synthetic_family
from .transformer import functional_divergence, model_forward

__all__ = [
    "AnalysisReport",
    "Checkpoint",
    "MergeLockError",
    "MergeLockKey",
    "ModelConfig",
    "Rng",
    "SamplingConfig",
    "TaskVector",
    "diagonal_align",
    "diagonal_align_qk",
    "fingerprint",
    "frobenius_report",
    "functional_divergence",
    "hungarian_align_mlp",
    "kabsch_align",
    "lambda_sweep",
    "lmc_curve",
    "merge",
    "merge_eval",
    "model_forward",
    "params_align",
    "parameter_distance",
    "protect",
    "protect_mergelock",
    "protect_params",
    "read_batch",
    "read_checkpoint",
    "read_key",
    "recover",
    "synthetic_family",
    "task_arithmetic",
    "task_vector",
    "ties_merge",
    "weight_average",
    "write_batch",
    "write_checkpoint",
    "write_key",
]
