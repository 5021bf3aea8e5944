"""Low-rank compressibility guided token pruning (LRCP) and subspace diagnostics."""

__version__ = "0.1.0"

from .errors import LrcpError
from .linalg import (
    Subspace,
    exact_svd,
    principal_angle_similarity,
    qr_orthonormalize,
    randomized_truncated_svd,
)
from .pruning import (
    Centering,
    CompressionConfig,
    CompressionResult,
    Scoring,
    SubspaceMethod,
    build_subspace,
    compress,
    merge_tokens,
    projection_residuals,
    select_top_k,
    surrogate_loss,
)
from .spectrum import (
    SpectrumReport,
    StabilityReport,
    explained_variance_spectrum,
    rank_at_variance,
    stability_random_dropout,
    stability_under_pruning,
)
from .staged import StagedPlan, compress_staged, make_staged_plan, preset_plan
from .synth import PlantedInstance, brute_force_best_subset, gen_background_outliers, gen_low_rank_noise
from .tensor_io import load_matrix, save_matrix, write_report

__all__ = [
    "LrcpError",
    "Subspace",
    "exact_svd",
    "principal_angle_similarity",
    "qr_orthonormalize",
    "randomized_truncated_svd",
    "Centering",
    "CompressionConfig",
    "CompressionResult",
    "Scoring",
    "SubspaceMethod",
    "build_subspace",
    "compress",
    "merge_tokens",
    "projection_residuals",
    "select_top_k",
    "surrogate_loss",
    "SpectrumReport",
    "StabilityReport",
    "explained_variance_spectrum",
    "rank_at_variance",
    "stability_random_dropout",
    "stability_under_pruning",
    "StagedPlan",
    "compress_staged",
    "make_staged_plan",
    "preset_plan",
    "PlantedInstance",
    "brute_force_best_subset",
    "gen_background_outliers",
    "gen_low_rank_noise",
    "load_matrix",
    "save_matrix",
    "write_report",
]
