"""Corpus-level evaluation of lineage scores.

Covers the pairwise score matrix, the F1-maximizing decision threshold, the
discriminative gap (mean related score minus mean unrelated score), and the
alignment / gap-penalty / component ablations, plus CSV and JSON report
emission.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .alignment import ALIGNMENT_MODES
from .errors import InputError
from .fingerprint import ModelFingerprint
from .similarity import COMPONENT_SELECTIONS, SimilarityParams, ghostspec_corr, ghostspec_mse

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
METRICS = ("mse", "corr")
LABELS = {"related": True, "unrelated": False}


@dataclass(frozen=True)
class LabeledPair:
    model_a: str
    model_b: str
    related: bool

    @property
    def label(self) -> str:
        return "related" if self.related else "unrelated"


class CurvePoint(NamedTuple):
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class SweepResult:
    best_threshold: float
    best_f1: float
    curve: tuple[CurvePoint, ...]


class SensitivityRow(NamedTuple):
    rho: float
    delta_mse: float
    delta_corr: float


def score(fa: ModelFingerprint, fb: ModelFingerprint, metric: str, params: SimilarityParams) -> float:
    if metric == "mse":
        return ghostspec_mse(fa, fb, params)[0]
    if metric == "corr":
        return ghostspec_corr(fa, fb, params)
    raise InputError(f"unknown metric {metric!r}; choose from {METRICS}")


@dataclass(frozen=True)
class ScoreMatrix:
    model_ids: tuple[str, ...]
    scores: np.ndarray

    @property
    def distances(self) -> np.ndarray:
        """``1 - S``, the precomputed-metric input for external embedding tools."""
        return 1.0 - self.scores


def pairwise_matrix(
    fingerprints: Sequence[ModelFingerprint],
    metric: str = "mse",
    params: SimilarityParams | None = None,
    workers: int = 1,
) -> ScoreMatrix:
    """Symmetric N x N score matrix; the diagonal holds self-similarities.

    Only the upper triangle is computed; each score is mirrored, so the
    result is exactly symmetric.
    """
    params = params or SimilarityParams()
    if len(fingerprints) < 2:
        raise InputError("pairwise_matrix needs at least 2 fingerprints")
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}; choose from {METRICS}")
    n = len(fingerprints)
    index = [(i, j) for i in range(n) for j in range(i, n)]

    def job(ij: tuple[int, int]) -> float:
        i, j = ij
        return score(fingerprints[i], fingerprints[j], metric, params)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(job, index))
    else:
        values = [job(ij) for ij in index]
    s = np.empty((n, n))
    for (i, j), v in zip(index, values):
        s[i, j] = s[j, i] = v
    return ScoreMatrix(tuple(fp.model_id for fp in fingerprints), s)


def _split(scored: Iterable[tuple[float, bool]]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(float(s), _as_bool(label)) for s, label in scored]
    related = np.array([s for s, r in pairs if r])
    unrelated = np.array([s for s, r in pairs if not r])
    if related.size == 0 or unrelated.size == 0:
        raise InputError("need at least one related and one unrelated pair")
    return related, unrelated


def _as_bool(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    try:
        return LABELS[str(label).strip().lower()]
    except KeyError:
        raise InputError(f"label must be 'related' or 'unrelated', got {label!r}") from None


def _f1_at(threshold: float, related: np.ndarray, unrelated: np.ndarray) -> CurvePoint:
    tp = int(np.sum(related > threshold))
    fp = int(np.sum(unrelated > threshold))
    fn = related.size - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / related.size
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return CurvePoint(threshold, precision, recall, f1)


def optimal_threshold(scored: Iterable[tuple[float, bool]]) -> SweepResult:
    """Threshold maximizing F1 with related as the positive class.

    Candidates are 0, 1 and the midpoints between consecutive distinct
    scores; a pair is predicted related when its score is strictly above the
    threshold. F1 ties go to the candidate farthest from any score, then to
    the smaller threshold.
    """
    related, unrelated = _split(scored)
    allscores = np.concatenate([related, unrelated])
    unique = np.unique(allscores)
    grid = np.unique(np.concatenate([[0.0, 1.0], (unique[:-1] + unique[1:]) / 2.0]))
    curve = tuple(_f1_at(float(t), related, unrelated) for t in grid)
    best = max(curve, key=lambda p: (p.f1, float(np.min(np.abs(allscores - p.threshold))), -p.threshold))
    return SweepResult(best.threshold, best.f1, curve)


def discriminative_gap(scored: Iterable[tuple[float, bool]]) -> float:
    related, unrelated = _split(scored)
    return float(related.mean() - unrelated.mean())


def _lookup(fingerprints: Mapping[str, ModelFingerprint], name: str) -> ModelFingerprint:
    try:
        return fingerprints[name]
    except KeyError:
        raise InputError(f"no fingerprint for model {name!r}") from None


def score_pairs(
    fingerprints: Mapping[str, ModelFingerprint],
    pairs: Sequence[LabeledPair],
    metric: str,
    params: SimilarityParams | None = None,
) -> list[tuple[float, bool]]:
    params = params or SimilarityParams()
    return [
        (score(_lookup(fingerprints, p.model_a), _lookup(fingerprints, p.model_b), metric, params), p.related)
        for p in pairs
    ]


def gaps(fingerprints, pairs, params: SimilarityParams) -> tuple[float, float]:
    """``(delta_mse, delta_corr)`` for one parameter setting."""
    return (
        discriminative_gap(score_pairs(fingerprints, pairs, "mse", params)),
        discriminative_gap(score_pairs(fingerprints, pairs, "corr", params)),
    )


def posa_sensitivity_sweep(
    fingerprints: Mapping[str, ModelFingerprint],
    pairs: Sequence[LabeledPair],
    rho_values: Sequence[float],
    params: SimilarityParams | None = None,
) -> list[SensitivityRow]:
    params = params or SimilarityParams()
    if not rho_values:
        raise InputError("rho sweep needs at least one value")
    rows = []
    for rho in rho_values:
        d_mse, d_corr = gaps(fingerprints, pairs, params.with_(rho=float(rho), alignment="posa"))
        rows.append(SensitivityRow(float(rho), d_mse, d_corr))
    return rows


def alignment_ablation(fingerprints, pairs, params: SimilarityParams | None = None) -> dict[str, tuple[float, float]]:
    """Discriminative gaps for POSA and each fixed-correspondence baseline."""
    params = params or SimilarityParams()
    return {mode: gaps(fingerprints, pairs, params.with_(alignment=mode)) for mode in ALIGNMENT_MODES}


def component_ablation(fingerprints, pairs, params: SimilarityParams | None = None) -> dict[str, tuple[float, float]]:
    """Discriminative gaps using the QK product, the VO product, or both."""
    params = params or SimilarityParams()
    return {c: gaps(fingerprints, pairs, params.with_(components=c)) for c in COMPONENT_SELECTIONS}


# --- file formats ------------------------------------------------------------

def read_labels(path: str | Path) -> list[LabeledPair]:
    """Parse ``model_a,model_b,related|unrelated`` lines.

    Blank lines and lines starting with ``#`` are skipped, as is a header row
    whose third field is ``label``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise InputError(f"{path}: no such labels file") from None
    pairs = []
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in row]
        if lineno == 1 and len(fields) == 3 and fields[2].lower() == "label":
            continue
        if len(fields) != 3 or not fields[0] or not fields[1]:
            raise InputError(f"{path}:{lineno}: expected 'model_a,model_b,label', got {','.join(row)!r}")
        try:
            related = LABELS[fields[2].lower()]
        except KeyError:
            raise InputError(f"{path}:{lineno}: label must be related|unrelated, got {fields[2]!r}") from None
        pairs.append(LabeledPair(fields[0], fields[1], related))
    if not pairs:
        raise InputError(f"{path}: no labeled pairs")
    return pairs


def write_labels(path: str | Path, pairs: Iterable[LabeledPair]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for p in pairs:
            writer.writerow([p.model_a, p.model_b, p.label])
    return path


def write_matrix_csv(path: str | Path, model_ids: Sequence[str], values: np.ndarray) -> Path:
    """Square matrix with model ids as row and column headers, 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model_id", *model_ids])
        for name, row in zip(model_ids, values):
            writer.writerow([name, *(f"{v:.6f}" for v in row)])
    return path


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return path


def evaluate(
    fingerprints: Mapping[str, ModelFingerprint],
    pairs: Sequence[LabeledPair],
    params: SimilarityParams | None = None,
    metrics: Sequence[str] = METRICS,
    rho_values: Sequence[float] | None = None,
) -> dict:
    """Score every labelled pair and summarize each metric.

    Returns a JSON-serializable dict with per-pair scores, the F1 sweep
    (best threshold, best F1 and F1 at the configured threshold) and the
    discriminative gap for every metric, plus an optional rho sweep.
    """
    params = params or SimilarityParams()
    per_pair = [{"model_a": p.model_a, "model_b": p.model_b, "label": p.label} for p in pairs]
    summary: dict = {"schema_version": REPORT_SCHEMA_VERSION, "params": params.as_dict(), "metrics": {}}
    sweeps: dict[str, SweepResult] = {}
    for metric in metrics:
        scored = score_pairs(fingerprints, pairs, metric, params)
        for row, (s, _) in zip(per_pair, scored):
            row[metric] = s
        sweep = optimal_threshold(scored)
        sweeps[metric] = sweep
        threshold = params.threshold_mse if metric == "mse" else params.threshold_corr
        at_default = _f1_at(threshold, *_split(scored))
        summary["metrics"][metric] = {
            "best_threshold": sweep.best_threshold,
            "best_f1": sweep.best_f1,
            "threshold": threshold,
            "f1_at_threshold": at_default.f1,
            "precision_at_threshold": at_default.precision,
            "recall_at_threshold": at_default.recall,
            "discriminative_gap": discriminative_gap(scored),
        }
    summary["pairs"] = per_pair
    if rho_values:
        rows = posa_sensitivity_sweep(fingerprints, pairs, rho_values, params)
        summary["rho_sensitivity"] = [r._asdict() for r in rows]
    summary["_sweeps"] = sweeps
    return summary


def write_report(directory: str | Path, summary: Mapping) -> dict[str, Path]:
    """Emit ``pair_scores.csv``, one ``f1_curve_<metric>.csv`` per metric,
    ``rho_sensitivity.csv`` when a sweep ran, and ``summary.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    metrics = list(summary["metrics"])
    out = {
        "pair_scores": _write_rows(
            directory / "pair_scores.csv",
            ["model_a", "model_b", "label", *metrics],
            ([p["model_a"], p["model_b"], p["label"], *(p[m] for m in metrics)] for p in summary["pairs"]),
        )
    }
    for metric, sweep in summary.get("_sweeps", {}).items():
        out[f"f1_curve_{metric}"] = _write_rows(
            directory / f"f1_curve_{metric}.csv", ["threshold", "precision", "recall", "f1"], sweep.curve
        )
    if "rho_sensitivity" in summary:
        out["rho_sensitivity"] = _write_rows(
            directory / "rho_sensitivity.csv",
            ["rho", "delta_mse", "delta_corr"],
            ([r["rho"], r["delta_mse"], r["delta_corr"]] for r in summary["rho_sensitivity"]),
        )
    doc = {k: v for k, v in summary.items() if not k.startswith("_")}
    path = directory / "summary.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    out["summary"] = path
    log.info("wrote %d report files to %s", len(out), directory)
    return out
