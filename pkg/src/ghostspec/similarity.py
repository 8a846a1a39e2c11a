"""Fingerprint comparison: the mse and corr lineage scores.

``ghostspec_mse`` aligns layers over a spectral distance matrix and maps the
mean distance along the path through an inverted sigmoid. ``ghostspec_corr``
takes the distance correlation of aligned per-layer spectral trend samples.
Both scores lie in ``[0, 1]`` and are symmetric in their arguments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .alignment import ALIGNMENT_MODES, DEFAULT_RHO, AlignmentPath, align, align_trend_sequences
from .errors import InputError
from .fingerprint import ModelFingerprint, trend_sequences
from .spectral import pair_distance

DEFAULT_TAU = 0.00371
DEFAULT_STEEPNESS = 1000.0
THRESHOLD_MSE = 0.85
THRESHOLD_CORR = 0.61

COMPONENT_SELECTIONS = {
    "both": ("qk", "vo"),
    "qk_only": ("qk",),
    "vo_only": ("vo",),
}


@dataclass(frozen=True)
class SimilarityParams:
    tau: float = DEFAULT_TAU
    steepness_k: float = DEFAULT_STEEPNESS
    rho: float = DEFAULT_RHO
    components: str = "both"
    alignment: str = "posa"
    threshold_mse: float = THRESHOLD_MSE
    threshold_corr: float = THRESHOLD_CORR

    def __post_init__(self) -> None:
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise InputError(f"tau must be > 0, got {self.tau}")
        if not (self.steepness_k > 0 and math.isfinite(self.steepness_k)):
            raise InputError(f"steepness k must be > 0, got {self.steepness_k}")
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise InputError(f"rho must be >= 0, got {self.rho}")
        if self.components not in COMPONENT_SELECTIONS:
            raise InputError(f"components must be one of {sorted(COMPONENT_SELECTIONS)}")
        if self.alignment not in ALIGNMENT_MODES:
            raise InputError(f"alignment must be one of {ALIGNMENT_MODES}")
        for name in ("threshold_mse", "threshold_corr"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")

    def with_(self, **changes) -> SimilarityParams:
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SimilarityReport:
    model_a: str
    model_b: str
    params: SimilarityParams
    mse_score: float | None = None
    d_path: float | None = None
    alignment: AlignmentPath | None = None
    corr_score: float | None = None

    @property
    def verdict_mse(self) -> bool | None:
        return None if self.mse_score is None else classify(self.mse_score, self.params.threshold_mse)

    @property
    def verdict_corr(self) -> bool | None:
        return None if self.corr_score is None else classify(self.corr_score, self.params.threshold_corr)


def sigmoid_score(d_path: float, tau: float = DEFAULT_TAU, k: float = DEFAULT_STEEPNESS) -> float:
    """``1 - 1 / (1 + exp(-k (d_path - tau)))``, evaluated without overflow."""
    x = k * (d_path - tau)
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def score_ceiling(tau: float = DEFAULT_TAU, k: float = DEFAULT_STEEPNESS) -> float:
    """The mse score of two identical fingerprints (d_path = 0)."""
    return sigmoid_score(0.0, tau, k)


def classify(score: float, threshold: float) -> bool:
    """``True`` (related) iff the score strictly exceeds the threshold."""
    if not 0.0 <= score <= 1.0:
        raise InputError(f"score {score} outside [0, 1]")
    return score > threshold


def _selected_components(fa: ModelFingerprint, fb: ModelFingerprint, components: str) -> tuple[str, ...]:
    if fa.variant != fb.variant:
        raise InputError(f"variant mismatch: {fa.variant} vs {fb.variant}")
    if fa.num_layers == 0 or fb.num_layers == 0:
        raise InputError("empty fingerprint")
    if fa.variant == "attention_invariant":
        return COMPONENT_SELECTIONS[components]
    if fa.variant == "mlp":
        if components != "both":
            raise InputError("component selection applies only to attention_invariant fingerprints")
        return fa.components
    raise InputError("attention_naive fingerprints are compared with naive_projection_distance")


def layer_distance_matrix(fa: ModelFingerprint, fb: ModelFingerprint, components: str = "both") -> np.ndarray:
    """``D[i, j]``: mean over components of the truncated spectral MSE.

    Each component truncates both spectra to ``floor(min(eff_rank_a, eff_rank_b))``
    (at least 1) values, min-max normalizes them and takes their MSE.
    """
    comps = _selected_components(fa, fb, components)
    d = np.zeros((fa.num_layers, fb.num_layers))
    for c in comps:
        for i, la in enumerate(fa.layers):
            sa, ra = la.spectra[c], la.eff_ranks[c]
            for j, lb in enumerate(fb.layers):
                d[i, j] += pair_distance(sa, lb.spectra[c], ra, lb.eff_ranks[c])
    return d / len(comps)


def _ordered(fa: ModelFingerprint, fb: ModelFingerprint) -> tuple[ModelFingerprint, ModelFingerprint, bool]:
    # the shallower model always indexes rows, so argument order cannot change the path
    if fa.num_layers > fb.num_layers:
        return fb, fa, True
    return fa, fb, False


def ghostspec_mse(
    fa: ModelFingerprint, fb: ModelFingerprint, params: SimilarityParams | None = None
) -> tuple[float, float, AlignmentPath]:
    """Return ``(score, d_path, path)``; ``path`` pairs are ``(layer_a, layer_b)``."""
    params = params or SimilarityParams()
    a, b, swapped = _ordered(fa, fb)
    d = layer_distance_matrix(a, b, params.components)
    path = align(d, mode=params.alignment, rho=params.rho)
    score = sigmoid_score(path.path_mean, params.tau, params.steepness_k)
    return score, path.path_mean, path.transposed() if swapped else path


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _double_center(a: np.ndarray) -> np.ndarray:
    return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean()


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"samples must be 1-D or 2-D, got {x.ndim}-D")
    return x


def distance_correlation(x, y) -> float:
    """Empirical distance correlation of paired samples (rows), in ``[0, 1]``.

    Returns 0 when either sample set has zero distance variance.
    """
    x, y = _as_samples(x), _as_samples(y)
    if x.shape[0] != y.shape[0]:
        raise InputError(f"sample count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InputError("distance correlation needs at least 2 samples")
    a = _double_center(_pairwise_distances(x))
    b = _double_center(_pairwise_distances(y))
    dcov2 = float(np.mean(a * b))
    dvar2_x = float(np.mean(a * a))
    dvar2_y = float(np.mean(b * b))
    if dvar2_x <= 0.0 or dvar2_y <= 0.0:
        return 0.0
    r = math.sqrt(max(dcov2, 0.0) / math.sqrt(dvar2_x * dvar2_y))
    return min(r, 1.0)


def ghostspec_corr(fa: ModelFingerprint, fb: ModelFingerprint, params: SimilarityParams | None = None) -> float:
    params = params or SimilarityParams()
    a, b, _ = _ordered(fa, fb)
    ta, tb = trend_sequences(a), trend_sequences(b)
    xa, xb = align_trend_sequences(ta, tb, rho=params.rho, mode=params.alignment)
    cols = [i for i, c in enumerate(("qk", "vo")) if c in COMPONENT_SELECTIONS[params.components]]
    return distance_correlation(xa[:, cols], xb[:, cols])


def compare(
    fa: ModelFingerprint,
    fb: ModelFingerprint,
    params: SimilarityParams | None = None,
    metrics: tuple[str, ...] = ("mse", "corr"),
) -> SimilarityReport:
    params = params or SimilarityParams()
    unknown = set(metrics) - {"mse", "corr"}
    if unknown or not metrics:
        raise InputError(f"metrics must be a non-empty subset of ('mse', 'corr'), got {metrics}")
    kwargs: dict = {}
    if "mse" in metrics:
        score, d_path, path = ghostspec_mse(fa, fb, params)
        kwargs.update(mse_score=score, d_path=d_path, alignment=path)
    if "corr" in metrics:
        kwargs["corr_score"] = ghostspec_corr(fa, fb, params)
    return SimilarityReport(fa.model_id, fb.model_id, params, **kwargs)


def naive_projection_distance(fa: ModelFingerprint, fb: ModelFingerprint) -> float:
    """Per-projection spectral distance averaged over q, k, v, o and all layers.

    Layers are compared index-by-index, so both models must have equal depth.
    This baseline is not invariant to weight reparameterization.
    """
    if fa.variant != "attention_naive" or fb.variant != "attention_naive":
        raise InputError("naive_projection_distance needs attention_naive fingerprints")
    if fa.num_layers != fb.num_layers:
        raise InputError(f"depth mismatch: {fa.num_layers} vs {fb.num_layers} layers (no alignment here)")
    total = 0.0
    for la, lb in zip(fa.layers, fb.layers):
        for p in fa.components:
            total += pair_distance(la.spectra[p], lb.spectra[p], la.eff_ranks[p], lb.eff_ranks[p])
    return total / (len(fa.components) * fa.num_layers)
