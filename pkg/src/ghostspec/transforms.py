"""Functionality-preserving weight attacks and synthetic model families.

Attacks rewrite stored weights without changing what the model computes:

* ``qk_perhead``   W_q -> P W_q, W_k -> P^{-T} W_k with P block-diagonal over
  heads, each block a random orthogonal matrix times a positive diagonal.
* ``vo_blockdiag`` W_v -> C W_v, W_o -> W_o C^{-1} with C block-diagonal and
  invertible per head.
* ``mlp_permute``  one permutation of the MLP hidden units applied to the
  up-projection rows and the down-projection columns.
* ``scale_uniform`` P = c I and C = c' I with scalars drawn from the range.

Synthetic models are small random transformers (no embeddings, no norms, no
positional encoding) with the tensor names of
:data:`~ghostspec.weights_io.ATTENTION_TEMPLATE`.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError
from .weights_io import Checkpoint, ModelLayout, discover_layout, write_checkpoint

ATTACK_KINDS = ("qk_perhead", "vo_blockdiag", "mlp_permute", "scale_uniform")
PERTURBATIONS = ("none", "low_rank_update", "layer_prune", "layer_duplicate")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    seed: int = 0
    scale_range: tuple[float, float] = (0.5, 2.0)
    head_dim: int = 128

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise InputError(f"unknown attack {self.kind!r}; choose from {ATTACK_KINDS}")
        low, high = self.scale_range
        if not (0 < low <= high and math.isfinite(high)):
            raise InputError(f"scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        if self.head_dim <= 0:
            raise InputError("head_dim must be positive")


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix from the QR factor of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _random_blocks(count: int, head_dim: int, scale_range, rng, two_sided: bool) -> np.ndarray:
    blocks = []
    for _ in range(count):
        scales = rng.uniform(*scale_range, size=head_dim)
        block = random_orthogonal(head_dim, rng) * scales
        if two_sided:
            block = block @ random_orthogonal(head_dim, rng)
        blocks.append(block)
    return np.stack(blocks)


def _heads(w: np.ndarray, head_dim: int, axis: int) -> int:
    size = w.shape[axis]
    if size % head_dim:
        raise InputError(f"dimension {size} not divisible by head_dim {head_dim}")
    return size // head_dim


def _check_blocks(blocks: np.ndarray) -> None:
    for h, block in enumerate(blocks):
        sv = np.linalg.svd(block, compute_uv=False)
        if sv[-1] <= sv[0] * 1e-12 or sv[0] == 0:
            raise InputError(f"block {h} is singular; transform must be invertible")


def _left_blockwise(blocks: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``block_diag(blocks) @ w`` without forming the full matrix."""
    h, hd, _ = blocks.shape
    return np.einsum("hij,hjd->hid", blocks, w.reshape(h, hd, -1)).reshape(w.shape)


def apply_qk_attack(
    wq: np.ndarray, wk: np.ndarray, spec: AttackSpec, blocks: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P W_q, P^{-T} W_k)`` for a per-head block-diagonal ``P``.

    With grouped-query attention every query head in a group shares the
    block of its key head, which keeps the attention logits unchanged.
    """
    if spec.kind not in ("qk_perhead", "scale_uniform"):
        raise InputError(f"apply_qk_attack cannot run attack {spec.kind!r}")
    n_q = _heads(wq, spec.head_dim, 0)
    n_kv = _heads(wk, spec.head_dim, 0)
    if n_q % n_kv:
        raise InputError(f"{n_q} query heads not a multiple of {n_kv} key heads")
    if blocks is None:
        rng = np.random.default_rng(spec.seed)
        blocks = _kv_blocks(spec, n_kv, rng, two_sided=False)
    _check_blocks(blocks)
    inv_t = np.linalg.inv(blocks).transpose(0, 2, 1)
    group = n_q // n_kv
    return _left_blockwise(np.repeat(blocks, group, axis=0), wq), _left_blockwise(inv_t, wk)


def apply_vo_attack(
    wv: np.ndarray, wo: np.ndarray, spec: AttackSpec, blocks: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(C W_v, W_o C^{-1})`` for a block-diagonal invertible ``C``.

    ``blocks`` (shape ``[kv_heads, head_dim, head_dim]``) may be given
    explicitly; a singular block raises :class:`InputError`.
    """
    if spec.kind not in ("vo_blockdiag", "scale_uniform"):
        raise InputError(f"apply_vo_attack cannot run attack {spec.kind!r}")
    n_kv = _heads(wv, spec.head_dim, 0)
    n_q = _heads(wo, spec.head_dim, 1)
    if n_q % n_kv:
        raise InputError(f"{n_q} output heads not a multiple of {n_kv} value heads")
    if blocks is None:
        rng = np.random.default_rng(spec.seed)
        blocks = _kv_blocks(spec, n_kv, rng, two_sided=True)
    blocks = np.asarray(blocks, dtype=np.float64)
    _check_blocks(blocks)
    inv = np.repeat(np.linalg.inv(blocks), n_q // n_kv, axis=0)
    hd = spec.head_dim
    wo_new = np.einsum("dhi,hij->dhj", wo.reshape(wo.shape[0], n_q, hd), inv).reshape(wo.shape)
    return _left_blockwise(blocks, wv), wo_new


def _kv_blocks(spec: AttackSpec, n_kv: int, rng: np.random.Generator, two_sided: bool) -> np.ndarray:
    if spec.kind == "scale_uniform":
        c = rng.uniform(*spec.scale_range)
        return np.repeat(c * np.eye(spec.head_dim)[None], n_kv, axis=0)
    return _random_blocks(n_kv, spec.head_dim, spec.scale_range, rng, two_sided)


def apply_mlp_permutation(
    w_up: np.ndarray, w_down: np.ndarray, seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Permute MLP hidden units: rows of ``w_up`` and columns of ``w_down``."""
    if w_up.shape[0] != w_down.shape[1]:
        raise InputError(f"hidden dimension mismatch: up has {w_up.shape[0]} rows, down {w_down.shape[1]} columns")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(w_up.shape[0])
    return w_up[perm], w_down[:, perm]


# --- synthetic models --------------------------------------------------------

@dataclass
class SyntheticModel:
    name: str
    tensors: dict[str, np.ndarray]
    config: dict[str, int]

    @property
    def num_layers(self) -> int:
        return self.config["num_hidden_layers"]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_arrays(self.tensors, config=dict(self.config))

    def layout(self) -> ModelLayout:
        return discover_layout(self.checkpoint())

    def layer(self, i: int) -> dict[str, np.ndarray]:
        return {p: self.tensors[_name(i, p)] for p in PROJECTIONS}

    def write(self, directory: str | Path, dtype: str = "F64") -> Path:
        """Write ``<directory>/model.safetensors`` plus ``config.json``."""
        return write_checkpoint(
            Path(directory) / "model.safetensors",
            self.tensors,
            dtype=dtype,
            metadata={"model_id": self.name},
            config=self.config,
        )


PROJECTIONS = ("q", "k", "v", "o", "up", "down")


def _name(layer: int, proj: str) -> str:
    if proj in ("up", "down"):
        return f"model.layers.{layer}.mlp.{proj}_proj.weight"
    return f"model.layers.{layer}.self_attn.{proj}_proj.weight"


def _from_layers(name: str, layers: Sequence[Mapping[str, np.ndarray]], config: Mapping[str, int]) -> SyntheticModel:
    tensors = {_name(i, p): np.array(w) for i, layer in enumerate(layers) for p, w in layer.items()}
    cfg = dict(config)
    cfg["num_hidden_layers"] = len(layers)
    return SyntheticModel(name, tensors, cfg)


@dataclass(frozen=True)
class SyntheticFamilySpec:
    d_model: int = 64
    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 16
    num_kv_heads: int | None = None
    mlp_hidden: int | None = None
    perturbation: str = "none"
    magnitude: float = 0.01
    num_changed: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model != self.num_heads * self.head_dim:
            raise InputError(f"d_model {self.d_model} != num_heads {self.num_heads} x head_dim {self.head_dim}")
        kv = self.kv_heads
        if kv <= 0 or self.num_heads % kv:
            raise InputError(f"num_heads {self.num_heads} not a multiple of num_kv_heads {kv}")
        if self.perturbation not in PERTURBATIONS:
            raise InputError(f"unknown perturbation {self.perturbation!r}; choose from {PERTURBATIONS}")
        if self.num_layers < 1 or self.magnitude < 0:
            raise InputError("num_layers must be >= 1 and magnitude >= 0")
        if self.perturbation == "layer_prune" and not 0 < self.num_changed < self.num_layers:
            raise InputError(f"cannot prune {self.num_changed} of {self.num_layers} layers")
        if self.perturbation == "layer_duplicate" and not 0 < self.num_changed <= self.num_layers:
            raise InputError(f"cannot duplicate {self.num_changed} of {self.num_layers} layers")

    @property
    def kv_heads(self) -> int:
        return self.num_kv_heads or self.num_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.d_model

    def config(self) -> dict[str, int]:
        return {
            "hidden_size": self.d_model,
            "num_hidden_layers": self.num_layers,
            "num_attention_heads": self.num_heads,
            "num_key_value_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "intermediate_size": self.hidden,
        }


def random_profile(n: int, rng: np.random.Generator) -> np.ndarray:
    """Slowly decaying spectrum ``1 - a x^b + c exp(-x / w)`` on ``x = j / n``.

    High effective rank (like trained attention products) with a shape that
    varies from draw to draw; scaled so the leading value is 1.
    """
    x = np.arange(1, n + 1, dtype=np.float64) / n
    a, b = rng.uniform(0.3, 0.95), rng.uniform(0.3, 3.0)
    c, w = rng.uniform(0.0, 1.5), rng.uniform(0.02, 0.2)
    s = 1.0 - a * x**b + c * np.exp(-x / w)
    return s / s[0]


def _factored(left: np.ndarray, profile: np.ndarray, right: np.ndarray) -> np.ndarray:
    """``left[:, :r] @ diag(profile) @ right[:, :r]^T`` for ``r = len(profile)``."""
    r = profile.size
    return (left[:, :r] * profile) @ right[:, :r].T


def random_layer(spec: SyntheticFamilySpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One layer built from Gaussian-derived orthogonal factors and drawn spectra.

    With as many kv heads as query heads, q and k share their left factor and
    o's right factor is v's left factor, so ``W_q^T W_k`` and ``W_o W_v`` carry
    the products of the drawn profiles: every layer gets a distinct,
    reproducible spectral signature.
    """
    d, hidden = spec.d_model, spec.hidden
    q_out, kv_out = spec.num_heads * spec.head_dim, spec.kv_heads * spec.head_dim

    def orth(n: int) -> np.ndarray:
        return random_orthogonal(n, rng)

    def prof(n: int) -> np.ndarray:
        return random_profile(n, rng)

    mha = q_out == kv_out
    q_left = orth(q_out)
    k_left = q_left if mha else orth(kv_out)
    v_left = orth(kv_out)
    o_right = v_left if mha else orth(q_out)
    return {
        "q": _factored(q_left, prof(min(q_out, d)), orth(d)),
        "k": _factored(k_left, prof(min(kv_out, d)), orth(d)),
        "v": _factored(v_left, prof(min(kv_out, d)), orth(d)),
        "o": _factored(orth(d), prof(min(d, q_out)), o_right),
        "up": _factored(orth(hidden), prof(min(hidden, d)), orth(d)),
        "down": _factored(orth(d), prof(min(hidden, d)), orth(hidden)),
    }


def base_model(spec: SyntheticFamilySpec, name: str = "base") -> SyntheticModel:
    rng = np.random.default_rng(spec.seed)
    layers = [random_layer(spec, rng) for _ in range(spec.num_layers)]
    return _from_layers(name, layers, spec.config())


def _layers(model: SyntheticModel) -> list[dict[str, np.ndarray]]:
    return [model.layer(i) for i in range(model.num_layers)]


def low_rank_update(model: SyntheticModel, magnitude: float, seed: int, name: str | None = None) -> SyntheticModel:
    """Add a rank-1 update of Frobenius norm ``magnitude * ||W||`` to every projection."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in _layers(model):
        new = {}
        for p, w in layer.items():
            u = rng.standard_normal(w.shape[0])
            v = rng.standard_normal(w.shape[1])
            update = np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
            new[p] = w + magnitude * np.linalg.norm(w) * update
        layers.append(new)
    return _from_layers(name or f"{model.name}-ft", layers, model.config)


def prune_layers(model: SyntheticModel, drop: Sequence[int], name: str | None = None) -> SyntheticModel:
    drop = set(drop)
    if not drop <= set(range(model.num_layers)) or len(drop) >= model.num_layers:
        raise InputError(f"cannot prune layers {sorted(drop)} from a {model.num_layers}-layer model")
    layers = [layer for i, layer in enumerate(_layers(model)) if i not in drop]
    return _from_layers(name or f"{model.name}-pruned", layers, model.config)


def duplicate_layers(model: SyntheticModel, copy: Sequence[int], name: str | None = None) -> SyntheticModel:
    """Insert a copy of each listed layer directly after it."""
    copy = set(copy)
    if not copy <= set(range(model.num_layers)):
        raise InputError(f"cannot duplicate layers {sorted(copy)} of a {model.num_layers}-layer model")
    layers = []
    for i, layer in enumerate(_layers(model)):
        layers.append(layer)
        if i in copy:
            layers.append({p: w.copy() for p, w in layer.items()})
    return _from_layers(name or f"{model.name}-expanded", layers, model.config)


def _interior_choice(num_layers: int, count: int, rng: np.random.Generator) -> list[int]:
    # keep the first and last layer in place when the model is deep enough
    pool = np.arange(1, num_layers - 1) if num_layers - 2 >= count else np.arange(num_layers)
    return sorted(int(i) for i in rng.choice(pool, size=count, replace=False))


def generate_family(spec: SyntheticFamilySpec) -> dict[str, SyntheticModel]:
    """Build ``{"base": ..., "derivative": ...}`` for one perturbation type."""
    base = base_model(spec, name="base")
    rng = np.random.default_rng([spec.seed, 1])
    if spec.perturbation == "none":
        derivative = _from_layers("derivative", _layers(base), base.config)
    elif spec.perturbation == "low_rank_update":
        derivative = low_rank_update(base, spec.magnitude, seed=int(rng.integers(2**31)), name="derivative")
    elif spec.perturbation == "layer_prune":
        derivative = prune_layers(base, _interior_choice(spec.num_layers, spec.num_changed, rng), name="derivative")
    else:
        derivative = duplicate_layers(base, _interior_choice(spec.num_layers, spec.num_changed, rng), name="derivative")
    return {"base": base, "derivative": derivative}


def write_family(models: Mapping[str, SyntheticModel], directory: str | Path, dtype: str = "F64") -> dict[str, Path]:
    return {name: model.write(Path(directory) / name, dtype=dtype) for name, model in models.items()}


# --- attacks on whole models -------------------------------------------------

def attack_model(model: SyntheticModel, specs: AttackSpec | Sequence[AttackSpec], name: str | None = None) -> SyntheticModel:
    """Apply attacks to every layer; each layer gets its own random draw."""
    if isinstance(specs, AttackSpec):
        specs = [specs]
    layers = _layers(model)
    for spec in specs:
        rng = np.random.default_rng(spec.seed)
        for layer in layers:
            seed = int(rng.integers(2**63))
            layer_spec = replace(spec, seed=seed)
            if spec.kind in ("qk_perhead", "scale_uniform"):
                layer["q"], layer["k"] = apply_qk_attack(layer["q"], layer["k"], layer_spec)
            if spec.kind in ("vo_blockdiag", "scale_uniform"):
                layer["v"], layer["o"] = apply_vo_attack(layer["v"], layer["o"], replace(layer_spec, seed=seed + 1))
            if spec.kind == "mlp_permute":
                layer["up"], layer["down"] = apply_mlp_permutation(layer["up"], layer["down"], seed)
    return _from_layers(name or f"{model.name}-attacked", layers, model.config)


def attack_checkpoint(handle: Checkpoint, layout: ModelLayout, specs: Sequence[AttackSpec]) -> dict[str, np.ndarray]:
    """Attack every attention/MLP projection of an on-disk checkpoint.

    Tensors other than the projections are copied through untouched.
    """
    tensors = {name: handle.load_array(name) for name in handle.names()}
    for spec in specs:
        rng = np.random.default_rng(spec.seed)
        for i in range(layout.num_layers):
            seed = int(rng.integers(2**63))
            layer_spec = replace(spec, seed=seed)
            n = {p: layout.tensor_name(i, p) for p in PROJECTIONS}
            if spec.kind in ("qk_perhead", "scale_uniform"):
                tensors[n["q"]], tensors[n["k"]] = apply_qk_attack(tensors[n["q"]], tensors[n["k"]], layer_spec)
            if spec.kind in ("vo_blockdiag", "scale_uniform"):
                tensors[n["v"]], tensors[n["o"]] = apply_vo_attack(
                    tensors[n["v"]], tensors[n["o"]], replace(layer_spec, seed=seed + 1)
                )
            if spec.kind == "mlp_permute":
                if n["up"] not in tensors or n["down"] not in tensors:
                    raise InputError(f"layer {i}: no MLP projections to permute")
                tensors[n["up"]], tensors[n["down"]] = apply_mlp_permutation(tensors[n["up"]], tensors[n["down"]], seed)
    return tensors


# --- minimal forward pass for functional checks -------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x: np.ndarray, layer: Mapping[str, np.ndarray], num_heads: int, num_kv_heads: int) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d_head)) V W_o^T`` for ``x`` of shape ``[T, d]``."""
    t = x.shape[0]
    q = x @ layer["q"].T
    hd = q.shape[1] // num_heads
    k = x @ layer["k"].T
    v = x @ layer["v"].T
    group = num_heads // num_kv_heads
    q = q.reshape(t, num_heads, hd).transpose(1, 0, 2)
    k = np.repeat(k.reshape(t, num_kv_heads, hd).transpose(1, 0, 2), group, axis=0)
    v = np.repeat(v.reshape(t, num_kv_heads, hd).transpose(1, 0, 2), group, axis=0)
    weights = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
    ctx = (weights @ v).transpose(1, 0, 2).reshape(t, num_heads * hd)
    return ctx @ layer["o"].T


def model_forward(model: SyntheticModel, x: np.ndarray) -> np.ndarray:
    """Residual stack of attention and ReLU-MLP blocks."""
    heads = model.config["num_attention_heads"]
    kv = model.config["num_key_value_heads"]
    for layer in _layers(model):
        x = x + attention_forward(x, layer, heads, kv)
        x = x + np.maximum(x @ layer["up"].T, 0.0) @ layer["down"].T
    return x


def depth_varying_corpus(
    seed: int = 0,
    d_model: int = 32,
    num_heads: int = 4,
    num_layers: int = 32,
    finetune: float = 0.01,
) -> tuple[dict[str, SyntheticModel], list[tuple[str, str, bool]]]:
    """A base model, five depth-modified relatives and two independent models.

    Relatives are pruned (2, 8, 10 interior layers) or expanded (4, 8
    duplicated layers) and then lightly fine-tuned with rank-1 updates of
    relative size ``finetune``. Independents are freshly seeded models four
    layers shallower than the base. Returns the models and the labelled
    ``(base, other, related)`` pairs.
    """
    spec = SyntheticFamilySpec(
        d_model=d_model, num_layers=num_layers, num_heads=num_heads,
        head_dim=d_model // num_heads, seed=seed,
    )
    base = base_model(spec, name="base")
    rng = np.random.default_rng([seed, 7])
    models = {"base": base}
    edits = [("pruned-2", "prune", 2), ("pruned-8", "prune", 8), ("pruned-10", "prune", 10),
             ("expanded-4", "dup", 4), ("expanded-8", "dup", 8)]
    for name, kind, count in edits:
        layers = _interior_choice(num_layers, count, rng)
        edited = prune_layers(base, layers) if kind == "prune" else duplicate_layers(base, layers)
        models[name] = low_rank_update(edited, finetune, seed=int(rng.integers(2**31)), name=name)
    for k in (1, 2):
        other = replace(spec, seed=int(rng.integers(2**31)) + k, num_layers=num_layers - 4)
        models[f"independent-{k}"] = base_model(other, name=f"independent-{k}")
    pairs = [("base", name, not name.startswith("independent")) for name in models if name != "base"]
    return models, pairs
