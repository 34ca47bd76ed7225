"""Rotated Top-K activation sparsity for a desk-scale decoder, with a sparse GEMV kernel."""

from rosa.errors import (
    ConvergenceError, InfeasibleCoefficientsError, InputError, ParseError, RosaError, SchemaError,
)
from rosa.kernel import ColMajorWeight, bench, fused_topk_gemv, sparse_gemv
from rosa.model import Mode, Model, ModelConfig, forward, model_output_error, synth_model, synth_tokens
from rosa.numeric import gemv_dense, jacobi_eigh, std_normal_inv_cdf
from rosa.rotation import RotatedModel, RotationMatrix, build_rotation, merge_rotations, rotate_model
from rosa.search import SearchSpace, grid_search
from rosa.sparsify import (
    SparseVec, SparsityPlan, ThresholdTable, compute_k, magnitude_sparsify, solve_alpha_constraints,
    top_k_sparsify,
)
from rosa.theory import monte_carlo_relative_error, theoretical_relative_error

__version__ = "0.1.0"

__all__ = [
    "ColMajorWeight",
    "ConvergenceError",
    "InfeasibleCoefficientsError",
    "InputError",
    "Mode",
    "Model",
    "ModelConfig",
    "ParseError",
    "RosaError",
    "RotatedModel",
    "RotationMatrix",
    "SchemaError",
    "SearchSpace",
    "SparseVec",
    "SparsityPlan",
    "ThresholdTable",
    "bench",
    "build_rotation",
    "compute_k",
    "forward",
    "fused_topk_gemv",
    "gemv_dense",
    "grid_search",
    "jacobi_eigh",
    "magnitude_sparsify",
    "merge_rotations",
    "model_output_error",
    "monte_carlo_relative_error",
    "rotate_model",
    "solve_alpha_constraints",
    "sparse_gemv",
    "std_normal_inv_cdf",
    "synth_model",
    "synth_tokens",
    "theoretical_relative_error",
    "top_k_sparsify",
]
