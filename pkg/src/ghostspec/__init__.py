"""Spectral fingerprints of attention weights for model lineage verification."""

__version__ = "0.1.0"

from .alignment import AlignmentPath, align, posa_align
from .errors import GhostSpecError, InputError, NumericalError
from .fingerprint import ModelFingerprint, extract_fingerprint, read_fingerprint, write_fingerprint
from .similarity import SimilarityParams, classify, compare, ghostspec_corr, ghostspec_mse
from .spectral import effective_rank, singular_values
from .weights_io import discover_layout, open_checkpoint

__all__ = [
    "AlignmentPath",
    "GhostSpecError",
    "InputError",
    "ModelFingerprint",
    "NumericalError",
    "SimilarityParams",
    "align",
    "classify",
    "compare",
    "discover_layout",
    "effective_rank",
    "extract_fingerprint",
    "ghostspec_corr",
    "ghostspec_mse",
    "open_checkpoint",
    "posa_align",
    "read_fingerprint",
    "singular_values",
    "write_fingerprint",
]
