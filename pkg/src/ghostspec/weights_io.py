"""Checkpoint reading/writing and attention-layout discovery.

Single-file layout (the open-weights ``.safetensors`` convention)::

    [8 bytes]  little-endian u64 N, the header length
    [N bytes]  JSON: {name: {"dtype", "shape", "data_offsets": [begin, end]}, ...}
    [rest]     data region; offsets are relative to its first byte

A sharded checkpoint is addressed through an index JSON file whose
``weight_map`` maps tensor names to shard filenames in the same directory.
An optional ``config.json`` next to the weights supplies head counts.
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, LayoutError

log = logging.getLogger(__name__)

HEADER_PREFIX = 8
INDEX_SUFFIX = ".index.json"
CONFIG_NAME = "config.json"
DEFAULT_HEAD_DIM = 128
ATTENTION_TEMPLATE = "model.layers.{layer}.self_attn.{proj}_proj.weight"
MLP_TEMPLATE = "model.layers.{layer}.mlp.{proj}_proj.weight"
ATTENTION_PROJECTIONS = ("q", "k", "v", "o")
MLP_PROJECTIONS = ("up", "down")

# dtype tag -> (storage dtype, byte width)
DTYPES: dict[str, tuple[str, int]] = {
    "F64": ("<f8", 8),
    "F32": ("<f4", 4),
    "F16": ("<f2", 2),
    "BF16": ("<u2", 2),
}


class LayoutWarning(UserWarning):
    """Layer discovery stopped before the last layer present in the file."""


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.begin

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


def decode(raw: bytes | np.ndarray, dtype: str) -> np.ndarray:
    """Widen a little-endian payload to float64; exact for every finite value."""
    storage, _ = DTYPES[dtype]
    arr = np.frombuffer(raw, dtype=storage)
    if dtype == "BF16":
        # bf16 is the high half of an f32 bit pattern
        arr = (arr.astype(np.uint32) << 16).view(np.float32)
    with np.errstate(invalid="ignore"):  # NaN payloads are rejected later by load_matrix
        return arr.astype(np.float64)


def encode(values: np.ndarray, dtype: str) -> bytes:
    """Narrow float values to the storage dtype (round to nearest even)."""
    values = np.asarray(values, dtype=np.float64)
    if dtype == "BF16":
        bits = values.astype(np.float32).view(np.uint32).astype(np.uint64)
        rounding = 0x7FFF + ((bits >> 16) & 1)
        out = ((bits + rounding) >> 16).astype(np.uint16)
        nan = np.isnan(values)
        out[nan] = 0x7FC0
        return out.astype("<u2").tobytes()
    return values.astype(DTYPES[dtype][0]).tobytes()


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointError(f"duplicate tensor name in header: {key!r}")
        out[key] = value
    return out


def read_header(path: Path) -> tuple[dict[str, TensorRecord], int, dict[str, str]]:
    """Parse and validate a single-file header.

    Returns the records, the absolute offset of the data region and the
    ``__metadata__`` mapping (empty when absent).
    """
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(HEADER_PREFIX)
        if len(prefix) < HEADER_PREFIX:
            raise CheckpointError(f"{path}: truncated header (file shorter than 8 bytes)")
        (hlen,) = struct.unpack("<Q", prefix)
        if hlen > size - HEADER_PREFIX:
            raise CheckpointError(
                f"{path}: truncated header (declared {hlen} bytes, "
                f"{size - HEADER_PREFIX} available)"
            )
        raw = fh.read(hlen)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header must be a JSON object")

    metadata = header.pop("__metadata__", None) or {}
    data_start = HEADER_PREFIX + hlen
    data_size = size - data_start
    records: dict[str, TensorRecord] = {}
    for name, entry in header.items():
        records[name] = _parse_entry(path, name, entry, data_size)

    spans = sorted((r.begin, r.end, r.name) for r in records.values() if r.nbytes)
    for (_, end_a, a), (begin_b, _, b) in zip(spans, spans[1:]):
        if begin_b < end_a:
            raise CheckpointError(f"{path}: tensors {a!r} and {b!r} overlap")
    return records, data_start, metadata


def _parse_entry(path: Path, name: str, entry: Any, data_size: int) -> TensorRecord:
    try:
        dtype = entry["dtype"]
        shape = tuple(entry["shape"])
        begin, end = entry["data_offsets"]
    except (TypeError, KeyError, ValueError):
        raise CheckpointError(f"{path}: malformed header entry for {name!r}") from None
    if dtype not in DTYPES:
        raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
    if not all(isinstance(d, int) and d >= 0 for d in shape):
        raise CheckpointError(f"{path}: tensor {name!r} has invalid shape {list(shape)}")
    if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
        raise CheckpointError(f"{path}: tensor {name!r} has invalid data_offsets")
    record = TensorRecord(name, dtype, shape, begin, end)
    if record.nbytes != record.numel * DTYPES[dtype][1]:
        raise CheckpointError(
            f"{path}: tensor {name!r} spans {record.nbytes} bytes, "
            f"expected {record.numel * DTYPES[dtype][1]}"
        )
    if end > data_size:
        raise CheckpointError(
            f"{path}: truncated data region (tensor {name!r} ends at {end}, "
            f"region holds {data_size} bytes)"
        )
    return record


@dataclass
class Checkpoint:
    """Read-only view over the tensors of one model.

    Tensors are decoded on demand from their file; nothing is cached, so a
    handle may be shared between threads.
    """

    records: dict[str, TensorRecord]
    sources: dict[str, tuple[Path, int]] = field(default_factory=dict)
    config: dict[str, Any] | None = None
    path: Path | None = None
    _arrays: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_arrays(
        cls, tensors: Mapping[str, np.ndarray], config: dict[str, Any] | None = None
    ) -> Checkpoint:
        """In-memory handle, used for synthetic models that never touch disk."""
        records = {}
        arrays = {}
        for name, value in tensors.items():
            arr = np.asarray(value, dtype=np.float64)
            records[name] = TensorRecord(name, "F64", arr.shape, 0, arr.nbytes)
            arrays[name] = arr
        return cls(records=records, config=config, _arrays=arrays)

    def __contains__(self, name: object) -> bool:
        return name in self.records

    def names(self) -> list[str]:
        return sorted(self.records)

    def raw_bytes(self, name: str) -> bytes:
        record = self._record(name)
        if name in self._arrays:
            return encode(self._arrays[name], record.dtype)
        path, data_start = self.sources[name]
        with open(path, "rb") as fh:
            fh.seek(data_start + record.begin)
            payload = fh.read(record.nbytes)
        if len(payload) != record.nbytes:
            raise CheckpointError(f"{path}: short read for tensor {name!r}")
        return payload

    def load_array(self, name: str) -> np.ndarray:
        record = self._record(name)
        if name in self._arrays:
            return self._arrays[name].copy()
        return decode(self.raw_bytes(name), record.dtype).reshape(record.shape)

    def load_matrix(self, name: str) -> np.ndarray:
        """Decode a 2-D tensor to a float64 matrix, rejecting NaN/Inf."""
        record = self._record(name)
        if len(record.shape) != 2:
            raise CheckpointError(
                f"tensor {name!r} is non-2-D (shape {list(record.shape)})"
            )
        m = self.load_array(name)
        bad = ~np.isfinite(m)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise CheckpointError(
                f"tensor {name!r} has non-finite entry {m[row, col]} at index ({row}, {col})"
            )
        return m

    def _record(self, name: str) -> TensorRecord:
        try:
            return self.records[name]
        except KeyError:
            raise CheckpointError(f"unknown tensor {name!r}") from None


def _load_config(directory: Path) -> dict[str, Any] | None:
    cfg = directory / CONFIG_NAME
    if not cfg.is_file():
        return None
    try:
        data = json.loads(cfg.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{cfg}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CheckpointError(f"{cfg}: expected a JSON object")
    return data


def _resolve(path: Path) -> Path:
    if not path.is_dir():
        return path
    for candidate in ("model.safetensors.index.json", "model.safetensors"):
        if (path / candidate).is_file():
            return path / candidate
    singles = sorted(path.glob("*.safetensors"))
    indexes = sorted(path.glob(f"*{INDEX_SUFFIX}"))
    if len(indexes) == 1:
        return indexes[0]
    if len(singles) == 1:
        return singles[0]
    raise CheckpointError(f"{path}: cannot pick a weight file in directory")


def open_checkpoint(path: str | Path) -> Checkpoint:
    """Open a single weight file, a shard index, or a directory holding one.

    Raises:
        CheckpointError: on any structural problem (truncation, bad header,
            missing shard, duplicate tensor names across shards).
    """
    path = _resolve(Path(path))
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint file")
    config = _load_config(path.parent)

    if path.name.endswith(INDEX_SUFFIX):
        return _open_sharded(path, config)
    records, data_start, _ = read_header(path)
    sources = {name: (path, data_start) for name in records}
    return Checkpoint(records=records, sources=sources, config=config, path=path)


def _open_sharded(index_path: Path, config: dict[str, Any] | None) -> Checkpoint:
    try:
        index = json.loads(index_path.read_text())
        weight_map = index["weight_map"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise CheckpointError(f"{index_path}: shard index lacks a weight_map") from None
    if not isinstance(weight_map, dict):
        raise CheckpointError(f"{index_path}: weight_map must be an object")

    records: dict[str, TensorRecord] = {}
    sources: dict[str, tuple[Path, int]] = {}
    for shard_name in sorted(set(weight_map.values())):
        if Path(shard_name).name != shard_name:
            raise CheckpointError(f"{index_path}: shard {shard_name!r} outside index directory")
        shard = index_path.parent / shard_name
        if not shard.is_file():
            raise CheckpointError(f"{index_path}: missing shard {shard_name!r}")
        shard_records, data_start, _ = read_header(shard)
        for name, record in shard_records.items():
            if name in records:
                raise CheckpointError(
                    f"duplicate tensor name {name!r} in shards "
                    f"{sources[name][0].name!r} and {shard_name!r}"
                )
            records[name] = record
            sources[name] = (shard, data_start)
    missing = sorted(set(weight_map) - set(records))
    if missing:
        raise CheckpointError(f"{index_path}: tensors listed but absent from shards: {missing[:5]}")
    return Checkpoint(records=records, sources=sources, config=config, path=index_path)


def serialize(
    tensors: Mapping[str, np.ndarray],
    dtype: str = "F32",
    metadata: Mapping[str, str] | None = None,
    raw: Mapping[str, tuple[str, tuple[int, ...], bytes]] | None = None,
) -> bytes:
    """Encode tensors to single-file checkpoint bytes.

    Output is deterministic: tensors are laid out in name order and the
    header is padded with spaces to an 8-byte boundary. ``raw`` entries
    carry pre-encoded ``(dtype, shape, payload)`` triples.
    """
    if dtype not in DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    blobs: dict[str, tuple[str, tuple[int, ...], bytes]] = dict(raw or {})
    for name, value in tensors.items():
        arr = np.asarray(value)
        blobs[name] = (dtype, tuple(arr.shape), encode(arr, dtype))

    header: dict[str, Any] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for name in sorted(blobs):
        tag, shape, payload = blobs[name]
        header[name] = {
            "dtype": tag,
            "shape": list(shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        offset += len(payload)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % 8)
    body = b"".join(blobs[name][2] for name in sorted(blobs))
    return struct.pack("<Q", len(text)) + text + body


def write_checkpoint(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    dtype: str = "F32",
    metadata: Mapping[str, str] | None = None,
    config: Mapping[str, Any] | None = None,
) -> Path:
    """Write a single-file checkpoint (and ``config.json`` if given)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(tensors, dtype, metadata))
    if config is not None:
        (path.parent / CONFIG_NAME).write_text(json.dumps(dict(config), indent=2, sort_keys=True) + "\n")
    return path


def write_sharded_checkpoint(
    directory: str | Path,
    shards: list[Mapping[str, np.ndarray]],
    dtype: str = "F32",
    config: Mapping[str, Any] | None = None,
) -> Path:
    """Write one file per shard plus ``model.safetensors.index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weight_map: dict[str, str] = {}
    total = len(shards)
    for i, tensors in enumerate(shards, start=1):
        name = f"model-{i:05d}-of-{total:05d}.safetensors"
        (directory / name).write_bytes(serialize(tensors, dtype))
        weight_map.update({t: name for t in tensors})
    index = directory / "model.safetensors.index.json"
    index.write_text(json.dumps({"metadata": {}, "weight_map": dict(sorted(weight_map.items()))}, indent=2) + "\n")
    if config is not None:
        (directory / CONFIG_NAME).write_text(json.dumps(dict(config), indent=2, sort_keys=True) + "\n")
    return index


@dataclass(frozen=True)
class ModelLayout:
    num_layers: int
    hidden_dim: int
    head_dim: int
    num_q_heads: int
    num_kv_heads: int
    name_template: str = ATTENTION_TEMPLATE
    mlp_template: str = MLP_TEMPLATE

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def tensor_name(self, layer: int, proj: str) -> str:
        template = self.mlp_template if proj in MLP_PROJECTIONS else self.name_template
        return template.format(layer=layer, proj=proj)


def _check_template(template: str) -> None:
    if "{layer}" not in template or "{proj}" not in template:
        raise LayoutError(f"name template {template!r} needs {{layer}} and {{proj}} placeholders")


def _config_value(config: Mapping[str, Any], *keys: str) -> int | None:
    for key in keys:
        if config.get(key) is not None:
            return int(config[key])
    return None


def discover_layout(
    handle: Checkpoint,
    name_template: str | None = None,
    head_dim: int | None = None,
    num_q_heads: int | None = None,
    num_kv_heads: int | None = None,
    mlp_template: str | None = None,
) -> ModelLayout:
    """Count layers and infer head structure from tensor names and shapes.

    The layer count is the length of the run of indices ``0, 1, ...`` for which
    all four attention projections resolve. Head counts come from explicit
    arguments, then from the ``config.json`` sidecar, then from the
    q/k projection row counts divided by ``head_dim`` (default 128).
    """
    template = name_template or ATTENTION_TEMPLATE
    _check_template(template)
    mlp_template = mlp_template or MLP_TEMPLATE
    _check_template(mlp_template)

    def resolves(i: int) -> bool:
        return all(template.format(layer=i, proj=p) in handle for p in ATTENTION_PROJECTIONS)

    num_layers = 0
    while resolves(num_layers):
        num_layers += 1
    if num_layers == 0:
        raise LayoutError(f"no attention layers found with template {template!r}")
    _warn_on_break(handle, template, num_layers)

    hidden = None
    for i in range(num_layers):
        q = handle.records[template.format(layer=i, proj="q")]
        if len(q.shape) != 2:
            raise LayoutError(f"layer {i}: q projection is not 2-D")
        if hidden is None:
            hidden = q.shape[1]
        elif q.shape[1] != hidden:
            raise LayoutError(f"inconsistent hidden_dim: layer {i} has {q.shape[1]}, expected {hidden}")
    assert hidden is not None

    q_rows = handle.records[template.format(layer=0, proj="q")].shape[0]
    k_rows = handle.records[template.format(layer=0, proj="k")].shape[0]
    config = handle.config or {}

    if config:
        cfg_layers = _config_value(config, "num_layers", "num_hidden_layers")
        if cfg_layers is not None and cfg_layers != num_layers:
            raise LayoutError(f"config declares {cfg_layers} layers but {num_layers} resolve")
        cfg_hidden = _config_value(config, "hidden_size")
        if cfg_hidden is not None and cfg_hidden != hidden:
            raise LayoutError(f"config hidden_size {cfg_hidden} != q-projection width {hidden}")

    if num_q_heads is None:
        num_q_heads = _config_value(config, "num_attention_heads")
    if num_kv_heads is None:
        num_kv_heads = _config_value(config, "num_key_value_heads")
    if head_dim is None:
        head_dim = _config_value(config, "head_dim")
    if head_dim is None and num_q_heads:
        head_dim = q_rows // num_q_heads
    if head_dim is None:
        head_dim = DEFAULT_HEAD_DIM
    if num_q_heads is None:
        num_q_heads = q_rows // head_dim
    if num_kv_heads is None:
        num_kv_heads = k_rows // head_dim

    if head_dim <= 0 or num_q_heads <= 0 or num_kv_heads <= 0:
        raise LayoutError(
            f"cannot infer heads: q rows {q_rows}, k rows {k_rows}, head_dim {head_dim}"
        )
    if q_rows != num_q_heads * head_dim or k_rows != num_kv_heads * head_dim:
        raise LayoutError(
            f"head structure mismatch: q rows {q_rows}, k rows {k_rows} vs "
            f"{num_q_heads}x{head_dim} query / {num_kv_heads}x{head_dim} key heads"
        )
    if num_q_heads % num_kv_heads:
        raise LayoutError(f"{num_q_heads} query heads not a multiple of {num_kv_heads} kv heads")
    return ModelLayout(
        num_layers=num_layers,
        hidden_dim=hidden,
        head_dim=head_dim,
        num_q_heads=num_q_heads,
        num_kv_heads=num_kv_heads,
        name_template=template,
        mlp_template=mlp_template,
    )


def _warn_on_break(handle: Checkpoint, template: str, num_layers: int) -> None:
    prefix, _, rest = template.partition("{layer}")
    pattern = re.compile(re.escape(prefix) + r"(\d+)" + re.escape(rest.split("{proj}")[0]))
    later = sorted(
        {int(m.group(1)) for name in handle.records if (m := pattern.match(name))}
        - set(range(num_layers))
    )
    if later:
        missing = [
            p for p in ATTENTION_PROJECTIONS
            if template.format(layer=num_layers, proj=p) not in handle
        ]
        msg = (
            f"layer discovery stopped at layer {num_layers} (missing {', '.join(missing)} "
            f"projection); tensors exist for later layers {later}"
        )
        log.warning(msg)
        warnings.warn(msg, LayoutWarning, stacklevel=3)
