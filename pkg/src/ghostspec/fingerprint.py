"""Per-layer spectral fingerprints of attention (and MLP) weights.

The default ``attention_invariant`` variant takes, for each layer, the
singular values of two products of stored weights,

    M_qk = W_q^T W_k        M_vo = W_o W_v        (both d_model x d_model)

which are unchanged by any reparameterization that rewrites ``W_q -> P W_q,
W_k -> P^{-T} W_k`` or ``W_v -> C W_v, W_o -> W_o C^{-1}``.
``attention_naive`` keeps the spectra of the four raw projections instead and
exists only as a vulnerable baseline; ``mlp`` fingerprints the MLP
up/down projections.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FingerprintFormatError, GhostSpecError, InputError, NumericalError
from .spectral import effective_rank, min_max_normalize, rank_window, singular_values
from .weights_io import Checkpoint, ModelLayout

FORMAT_VERSION = 1

COMPONENTS: dict[str, tuple[str, ...]] = {
    "attention_invariant": ("qk", "vo"),
    "attention_naive": ("q", "k", "v", "o"),
    "mlp": ("up", "down"),
}
VARIANTS = tuple(COMPONENTS)


@dataclass(frozen=True)
class LayerFingerprint:
    layer_index: int
    spectra: dict[str, np.ndarray]
    eff_ranks: dict[str, float]

    @classmethod
    def from_spectra(cls, layer_index: int, spectra: dict[str, np.ndarray]) -> LayerFingerprint:
        spectra = {k: np.asarray(v, dtype=np.float64) for k, v in spectra.items()}
        return cls(layer_index, spectra, {k: effective_rank(v) for k, v in spectra.items()})

    @property
    def qk_spectrum(self) -> np.ndarray:
        return self.spectra["qk"]

    @property
    def vo_spectrum(self) -> np.ndarray:
        return self.spectra["vo"]

    @property
    def qk_eff_rank(self) -> float:
        return self.eff_ranks["qk"]

    @property
    def vo_eff_rank(self) -> float:
        return self.eff_ranks["vo"]


@dataclass(frozen=True)
class ModelFingerprint:
    model_id: str
    num_layers: int
    hidden_dim: int
    layers: tuple[LayerFingerprint, ...]
    variant: str = "attention_invariant"
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.variant not in COMPONENTS:
            raise InputError(f"unknown fingerprint variant {self.variant!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.num_layers:
            raise InputError(f"{len(self.layers)} layer records for num_layers={self.num_layers}")
        expected = set(self.components)
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise InputError(f"layer records not contiguous from 0 (found {layer.layer_index} at {i})")
            if set(layer.spectra) != expected:
                raise InputError(
                    f"layer {i} carries {sorted(layer.spectra)}, variant {self.variant} needs {sorted(expected)}"
                )

    @property
    def components(self) -> tuple[str, ...]:
        return COMPONENTS[self.variant]

    def spectra(self, component: str) -> list[np.ndarray]:
        return [layer.spectra[component] for layer in self.layers]


@dataclass(frozen=True)
class TrendSequences:
    qk_means: np.ndarray
    vo_means: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.qk_means)

    @property
    def samples(self) -> np.ndarray:
        """Per-layer 2-D samples ``(qk mean, vo mean)``, shape ``(L, 2)``."""
        return np.column_stack([self.qk_means, self.vo_means])


def expand_kv(w: np.ndarray, num_kv_heads: int, group_size: int) -> np.ndarray:
    """Repeat each kv-head row block ``group_size`` times (grouped-query attention)."""
    if group_size == 1:
        return w
    rows, cols = w.shape
    if rows % num_kv_heads:
        raise InputError(f"{rows} kv rows not divisible into {num_kv_heads} heads")
    blocks = w.reshape(num_kv_heads, rows // num_kv_heads, cols)
    return np.repeat(blocks, group_size, axis=0).reshape(rows * group_size, cols)


def invariant_products(
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    layout: ModelLayout,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W_q^T W_k, W_o W_v)`` with K/V expanded to the query heads.

    Stored shapes: ``wq`` [q_out, d], ``wk``/``wv`` [kv_out, d], ``wo`` [d, q_out].
    """
    d = layout.hidden_dim
    wk = expand_kv(wk, layout.num_kv_heads, layout.group_size)
    wv = expand_kv(wv, layout.num_kv_heads, layout.group_size)
    q_out = wq.shape[0]
    if wq.shape[1] != d or wk.shape != (q_out, d) or wv.shape != (q_out, d):
        raise InputError(
            f"projection shapes q{wq.shape} k{wk.shape} v{wv.shape} (after kv expansion) "
            f"inconsistent with d_model={d}"
        )
    if wo.shape != (d, q_out):
        raise InputError(f"o projection shape {wo.shape}, expected {(d, q_out)}")
    return wq.T @ wk, wo @ wv


def _layer_spectra(handle: Checkpoint, layout: ModelLayout, variant: str, i: int) -> dict[str, np.ndarray]:
    if variant == "mlp":
        return {p: singular_values(handle.load_matrix(layout.tensor_name(i, p))) for p in ("up", "down")}
    w = {p: handle.load_matrix(layout.tensor_name(i, p)) for p in ("q", "k", "v", "o")}
    if variant == "attention_naive":
        return {p: singular_values(m) for p, m in w.items()}
    m_qk, m_vo = invariant_products(w["q"], w["k"], w["v"], w["o"], layout)
    return {"qk": singular_values(m_qk), "vo": singular_values(m_vo)}


def _extract_layer(handle: Checkpoint, layout: ModelLayout, variant: str, i: int) -> LayerFingerprint:
    try:
        return LayerFingerprint.from_spectra(i, _layer_spectra(handle, layout, variant, i))
    except NumericalError as exc:
        raise NumericalError(f"layer {i}: {exc}") from exc
    except GhostSpecError as exc:
        raise InputError(f"layer {i}: {exc}") from exc


def extract_fingerprint(
    handle: Checkpoint,
    layout: ModelLayout,
    variant: str = "attention_invariant",
    model_id: str | None = None,
    workers: int = 1,
) -> ModelFingerprint:
    """Fingerprint every layer of ``handle``.

    Layers are independent; with ``workers > 1`` they are computed on a
    thread pool and reassembled by index, giving identical output.
    """
    if variant not in COMPONENTS:
        raise InputError(f"unknown fingerprint variant {variant!r}; choose from {VARIANTS}")
    if model_id is None:
        model_id = _default_model_id(handle)
    indices = range(layout.num_layers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            layers = list(pool.map(lambda i: _extract_layer(handle, layout, variant, i), indices))
    else:
        layers = [_extract_layer(handle, layout, variant, i) for i in indices]
    return ModelFingerprint(
        model_id=model_id,
        num_layers=layout.num_layers,
        hidden_dim=layout.hidden_dim,
        layers=tuple(layers),
        variant=variant,
    )


def _default_model_id(handle: Checkpoint) -> str:
    if handle.path is None:
        return "model"
    path = handle.path
    if path.name.startswith("model") and path.parent.name:
        return path.parent.name
    return path.name.split(".")[0]


def trend_means(spectra: Iterable[np.ndarray], eff_ranks: Iterable[float]) -> np.ndarray:
    """Mean of the top-K min-max normalized values, K = floor(effective rank)."""
    out = []
    for s, er in zip(spectra, eff_ranks):
        out.append(float(np.mean(min_max_normalize(s)[: rank_window(er)])))
    return np.array(out)


def trend_sequences(fp: ModelFingerprint) -> TrendSequences:
    if fp.variant != "attention_invariant":
        raise InputError(f"trend sequences need an attention_invariant fingerprint, got {fp.variant}")
    return TrendSequences(
        qk_means=trend_means(fp.spectra("qk"), (l.qk_eff_rank for l in fp.layers)),
        vo_means=trend_means(fp.spectra("vo"), (l.vo_eff_rank for l in fp.layers)),
    )


# --- persistence -----------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % x


def _fmt_array(values: np.ndarray) -> str:
    return "[" + ", ".join(_fmt(v) for v in values) + "]"


def dumps_fingerprint(fp: ModelFingerprint) -> str:
    """Render the fingerprint document; doubles carry 17 significant digits."""
    lines = [
        "{",
        f'  "format_version": {fp.format_version},',
        f'  "model_id": {json.dumps(fp.model_id)},',
        f'  "variant": {json.dumps(fp.variant)},',
        f'  "num_layers": {fp.num_layers},',
        f'  "hidden_dim": {fp.hidden_dim},',
        '  "layers": [',
    ]
    records = []
    for layer in fp.layers:
        fields = [f'"layer_index": {layer.layer_index}']
        fields += [f'"{c}_sv": {_fmt_array(layer.spectra[c])}' for c in fp.components]
        fields += [f'"{c}_eff_rank": {_fmt(layer.eff_ranks[c])}' for c in fp.components]
        records.append("    {" + ", ".join(fields) + "}")
    lines.append(",\n".join(records))
    lines += ["  ]", "}"]
    return "\n".join(lines) + "\n"


def write_fingerprint(fp: ModelFingerprint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_fingerprint(fp), encoding="utf-8")
    return path


def loads_fingerprint(text: str) -> ModelFingerprint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FingerprintFormatError(f"fingerprint parse error at byte offset {offset}: {exc.msg}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FingerprintFormatError("not a fingerprint document (no format_version)")
    version = doc["format_version"]
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise FingerprintFormatError(f"unsupported version {version!r} (reader handles {FORMAT_VERSION})")
    try:
        variant = doc["variant"]
        components = COMPONENTS[variant]
        layers = []
        for rec in doc["layers"]:
            spectra = {c: np.array(rec[f"{c}_sv"], dtype=np.float64) for c in components}
            ranks = {c: float(rec[f"{c}_eff_rank"]) for c in components}
            for c, s in spectra.items():
                if s.ndim != 1 or s.size == 0 or not np.all(np.isfinite(s)) or np.any(s < 0):
                    raise FingerprintFormatError(f"layer {rec['layer_index']}: invalid {c}_sv values")
            layers.append(LayerFingerprint(int(rec["layer_index"]), spectra, ranks))
        return ModelFingerprint(
            model_id=str(doc["model_id"]),
            num_layers=int(doc["num_layers"]),
            hidden_dim=int(doc["hidden_dim"]),
            layers=tuple(layers),
            variant=variant,
            format_version=version,
        )
    except FingerprintFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FingerprintFormatError(f"malformed fingerprint document: {exc!r}") from None


def read_fingerprint(path: str | Path) -> ModelFingerprint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FingerprintFormatError(f"{path}: no such fingerprint file") from None
    except UnicodeDecodeError as exc:
        raise FingerprintFormatError(f"{path}: not UTF-8 text (byte offset {exc.start})") from None
    return loads_fingerprint(text)
