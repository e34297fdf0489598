"""Spectral pairwise embedding comparison: SPEC clusters, SPEC-diff and SPEC-align."""

from spec_compare.config import AlignConfig, SpecConfig
from spec_compare.errors import (
    AlignDivergenceError,
    DegenerateEigenvalueError,
    NumericalError,
    PowerIterationError,
    SpecError,
    StageError,
    ValidationError,
)
from spec_compare.io_model import EmbeddingSet, PairedDataset, load_embedding_set, pair, write_report
from spec_compare.kernels import KernelSpec, build_feature_map
from spec_compare.spec_core import SpecResult, run_spec, run_spec_paired

__all__ = [
    "AlignConfig",
    "AlignDivergenceError",
    "DegenerateEigenvalueError",
    "EmbeddingSet",
    "KernelSpec",
    "NumericalError",
    "PairedDataset",
    "PowerIterationError",
    "SpecConfig",
    "SpecError",
    "SpecResult",
    "StageError",
    "ValidationError",
    "build_feature_map",
    "load_embedding_set",
    "pair",
    "run_spec",
    "run_spec_paired",
    "write_report",
]
