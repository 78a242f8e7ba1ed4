"""Composed-retrieval calibration on synthetic triplet benchmarks.

A reference video plus a modification text become one composed query;
the model disentangles what each side contributed, calibrates the
composed feature along directional anchors, and weighs both channels by
evidential reliability.  Everything runs on a small from-scratch
reverse-mode tape over float64 matrices, with an independent vectorized
forward for evaluation and finite-difference cross-checks.
"""

from __future__ import annotations

from .autodiff import (
    DegenerateRowError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    gradcheck,
    gradcheck_multi,
    grads,
    scalar,
    tensor,
)
from .config import (
    VARIANTS,
    ConfigError,
    RunConfig,
    preset,
    variant_config,
)
from .data import (
    DataFormatError,
    SynthDataset,
    batch_indices,
    batches_per_epoch,
    generate,
    load,
    save,
)
from .evaluate import (
    Index,
    RecallReport,
    build_index,
    distractor_hardness,
    evaluate_model,
    export_similarity_matrix,
    rank_from_scores,
    recall_from_ranks,
    score_against_index,
    target_ranks,
    write_report,
)
from .evidence import (
    MassFunction,
    TotalConflictError,
    combine_brute_force,
    combine_iterated,
    dempster_combine,
    evidence_to_dirichlet,
    oracle_selftest,
)
from .model import forward_sample, init_params, param_shapes
from .train import (
    AdamW,
    DivergenceError,
    TrainResult,
    ablate,
    gradcheck_model,
    load_checkpoint,
    save_checkpoint,
    sweep,
    total_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "scalar",
    "backward",
    "grads",
    "gradcheck",
    "gradcheck_multi",
    "ShapeError",
    "NonFiniteError",
    "DegenerateRowError",
    "RunConfig",
    "ConfigError",
    "preset",
    "VARIANTS",
    "variant_config",
    "SynthDataset",
    "DataFormatError",
    "generate",
    "save",
    "load",
    "batch_indices",
    "batches_per_epoch",
    "Index",
    "RecallReport",
    "build_index",
    "score_against_index",
    "rank_from_scores",
    "recall_from_ranks",
    "target_ranks",
    "evaluate_model",
    "export_similarity_matrix",
    "distractor_hardness",
    "write_report",
    "MassFunction",
    "TotalConflictError",
    "dempster_combine",
    "combine_iterated",
    "combine_brute_force",
    "evidence_to_dirichlet",
    "oracle_selftest",
    "param_shapes",
    "init_params",
    "forward_sample",
    "AdamW",
    "DivergenceError",
    "TrainResult",
    "train",
    "total_loss",
    "ablate",
    "sweep",
    "gradcheck_model",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
