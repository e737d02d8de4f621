"""Checkpoint, key and task-vector types plus the ``.mlck``/``.mlkey`` container.

Container layout (all integers little-endian)::

    u64     header length N
    N bytes UTF-8 JSON header, canonical (sorted keys, no whitespace)
    ...     raw tensor data, each tensor C-contiguous little-endian

The header holds ``version``, ``kind``, ``config``, ``metadata`` and the
``tensors`` table of ``{name, dtype, shape, byte_begin, byte_end}`` with
offsets relative to the start of the data section.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import CorruptedKeyError, FingerprintWarning, ParameterError, ParseError, SchemaError
from .linalg import Permutation

FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
ACTIVATIONS = ("relu", "gelu", "tanh")
KEY_TOLERANCE = 1e-10

ATTN_WEIGHTS = ("w_q", "w_k", "w_v", "w_o")
ATTN_BIASES = ("b_q", "b_k", "b_v", "b_o")
MLP_PARTS = ("w1", "b1", "w2", "b2")
LN_PARTS = ("gamma", "beta")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    d_model: int
    d_ff: int
    activation: str = "gelu"
    includes_bias: bool = True

    def __post_init__(self):
        if self.num_layers < 0:
            raise SchemaError(f"num_layers must be >= 0, got {self.num_layers}")
        for name in ("num_heads", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise SchemaError(f"num_heads={self.num_heads} does not divide d_model={self.d_model}")
        if self.activation not in ACTIVATIONS:
            raise SchemaError(f"unknown activation {self.activation!r}", allowed=list(ACTIVATIONS))

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "d_ff": self.d_ff,
            "d_head": self.d_head,
            "d_model": self.d_model,
            "includes_bias": self.includes_bias,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        try:
            cfg = cls(
                num_layers=int(d["num_layers"]),
                num_heads=int(d["num_heads"]),
                d_model=int(d["d_model"]),
                d_ff=int(d["d_ff"]),
                activation=str(d["activation"]),
                includes_bias=bool(d["includes_bias"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid model config: {exc}") from exc
        if "d_head" in d and int(d["d_head"]) != cfg.d_head:
            raise SchemaError(f"config d_head={d['d_head']} disagrees with d_model/num_heads={cfg.d_head}")
        return cfg

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every tensor the config requires, in canonical order."""
        dh, df = self.d_model, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.num_layers):
            for w in ATTN_WEIGHTS:
                shapes[f"layers.{i}.attn.{w}"] = (dh, dh)
            for b in ATTN_BIASES:
                shapes[f"layers.{i}.attn.{b}"] = (dh,)
            shapes[f"layers.{i}.mlp.w1"] = (df, dh)
            shapes[f"layers.{i}.mlp.b1"] = (df,)
            shapes[f"layers.{i}.mlp.w2"] = (dh, df)
            shapes[f"layers.{i}.mlp.b2"] = (dh,)
            for ln in ("ln1", "ln2"):
                for p in LN_PARTS:
                    shapes[f"layers.{i}.{ln}.{p}"] = (dh,)
        return shapes


def is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ATTN_BIASES or leaf in ("b1", "b2")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _validate_tensors(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    shapes = config.tensor_shapes()
    extra = [n for n in tensors if n not in shapes]
    if extra:
        raise SchemaError(f"unknown tensor {extra[0]!r}", tensor=extra[0])
    for name, shape in shapes.items():
        if name not in tensors:
            raise SchemaError(f"missing tensor {name!r}", tensor=name)
        arr = tensors[name]
        if tuple(arr.shape) != shape:
            raise SchemaError(f"tensor {name!r} has shape {tuple(arr.shape)}, config implies {shape}", tensor=name)
        if not np.all(np.isfinite(arr)):
            raise SchemaError(f"tensor {name!r} has non-finite entries", tensor=name)
        if not config.includes_bias and is_bias(name) and np.any(arr != 0):
            raise SchemaError(f"bias {name!r} must be zero when includes_bias is false", tensor=name)


class Checkpoint:
    """Immutable model configuration plus named float64 tensors."""

    __slots__ = ("config", "_tensors")

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        frozen = {name: _frozen(tensors[name]) for name in tensors}
        _validate_tensors(config, frozen)
        order = config.tensor_shapes()
        self.config = config
        self._tensors = {name: frozen[name] for name in order}

    @property
    def tensors(self) -> Mapping[str, np.ndarray]:
        return dict(self._tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "Checkpoint":
        merged = dict(self._tensors)
        merged.update(updates)
        return Checkpoint(self.config, merged)

    def map(self, fn) -> "Checkpoint":
        return Checkpoint(self.config, {n: fn(n, a) for n, a in self._tensors.items()})

    def num_params(self) -> int:
        return sum(a.size for a in self._tensors.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(a, other._tensors[n]) for n, a in self._tensors.items()
        )

    def __repr__(self) -> str:
        c = self.config
        return f"Checkpoint(L={c.num_layers}, H={c.num_heads}, d_model={c.d_model}, d_ff={c.d_ff}, {c.activation})"


def require_same_schema(*ckpts: Checkpoint) -> ModelConfig:
    config = ckpts[0].config
    for c in ckpts[1:]:
        if c.config != config:
            raise SchemaError("checkpoints have different configurations", left=config.to_dict(), right=c.config.to_dict())
    return config


# -- container --------------------------------------------------------------


def _pack(kind: str, config: dict | None, metadata: dict, tensors: Mapping[str, np.ndarray], dtype: str) -> bytes:
    if dtype not in DTYPES:
        raise ParameterError(f"unknown storage dtype {dtype!r}", allowed=list(DTYPES))
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        table.append({"byte_begin": offset, "byte_end": offset + len(raw), "dtype": dtype, "name": name, "shape": list(arr.shape)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"config": config, "kind": kind, "metadata": metadata, "tensors": table, "version": FORMAT_VERSION})
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


class Container(NamedTuple):
    kind: str
    config: dict | None
    metadata: dict
    tensors: dict[str, np.ndarray]
    dtypes: dict[str, str]


def unpack(blob: bytes) -> Container:
    if len(blob) < 8:
        raise ParseError("file shorter than the 8-byte header length", offset=len(blob))
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    if 8 + hlen > len(blob):
        raise ParseError(f"header length {hlen} runs past end of file", offset=8)
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError(f"header is not UTF-8: {exc.reason}", offset=8 + exc.start) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not valid JSON: {exc.msg}", offset=8 + exc.pos) from exc
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object", offset=8)
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {header.get('version')!r}", offset=8)
    table = header.get("tensors")
    if not isinstance(table, list):
        raise ParseError("header lacks a tensor table", offset=8)
    base = 8 + hlen
    data_len = len(blob) - base
    tensors, dtypes = {}, {}
    expected = 0
    for entry in table:
        try:
            name, dtype = entry["name"], entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            begin, end = int(entry["byte_begin"]), int(entry["byte_end"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed tensor table entry: {exc}", offset=base + expected) from exc
        if dtype not in DTYPES:
            raise ParseError(f"tensor {name!r} has unsupported dtype {dtype!r}", offset=base + begin, tensor=name)
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r}", offset=base + begin, tensor=name)
        count = int(np.prod(shape)) if shape else 1
        if begin != expected or end - begin != count * DTYPES[dtype].itemsize:
            raise ParseError(f"tensor {name!r} byte range [{begin}, {end}) is inconsistent", offset=base + begin, tensor=name)
        if end > data_len:
            raise ParseError(f"data truncated inside tensor {name!r}", offset=base + end, tensor=name)
        arr = np.frombuffer(blob, dtype=DTYPES[dtype], count=count, offset=base + begin)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        dtypes[name] = dtype
        expected = end
    if expected != data_len:
        raise ParseError(f"{data_len - expected} trailing bytes after the last tensor", offset=base + expected)
    return Container(header.get("kind", "checkpoint"), header.get("config"), header.get("metadata") or {}, tensors, dtypes)


def _read_container(path) -> Container:
    return unpack(Path(path).read_bytes())


def serialize_checkpoint(ckpt: Checkpoint, dtype: str = "f64") -> bytes:
    return _pack("checkpoint", ckpt.config.to_dict(), {}, ckpt.tensors, dtype)


def fingerprint(ckpt: Checkpoint) -> str:
    """SHA-256 of the canonical f64 serialization."""
    return hashlib.sha256(serialize_checkpoint(ckpt, "f64")).hexdigest()


def write_checkpoint(path, ckpt: Checkpoint, dtype: str = "f64") -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt, dtype))


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    c = unpack(blob)
    if c.kind != "checkpoint":
        raise SchemaError(f"expected a checkpoint file, found kind {c.kind!r}")
    if not isinstance(c.config, dict):
        raise SchemaError("checkpoint header has no model config")
    config = ModelConfig.from_dict(c.config)
    if not c.tensors and config.tensor_shapes():
        raise SchemaError("empty tensor table but the config requires tensors", tensor=next(iter(config.tensor_shapes())))
    return Checkpoint(config, c.tensors)


def read_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def write_batch(path, batch: Iterable[np.ndarray], dtype: str = "f64") -> None:
    tensors = {f"batch.{i}": np.asarray(x, dtype=np.float64) for i, x in enumerate(batch)}
    Path(path).write_bytes(_pack("batch", None, {"size": len(tensors)}, tensors, dtype))


def read_batch(path) -> list[np.ndarray]:
    c = _read_container(path)
    if c.kind != "batch":
        raise SchemaError(f"expected a batch file, found kind {c.kind!r}")
    return [c.tensors[f"batch.{i}"] for i in range(len(c.tensors))]


# -- protection keys ---------------------------------------------------------


class HeadTransform(NamedTuple):
    a: np.ndarray
    a_inv: np.ndarray
    b: np.ndarray
    b_inv: np.ndarray


@dataclass
class MergeLockKey:
    """Per-layer, per-head transform pairs that undo a protection.

    ``heads[(layer, head)]`` holds the QK pair (``a``, ``a_inv``) and the VO
    pair (``b``, ``b_inv``). The ``params`` scheme additionally stores one MLP
    permutation per layer and the concatenated per-layer QK/VO diagonals.
    """

    scheme: str
    num_layers: int
    num_heads: int
    d_head: int
    heads: dict[tuple[int, int], HeadTransform]
    mlp_perms: list[Permutation] | None = None
    qk_diag: list[np.ndarray] | None = None
    vo_diag: list[np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.scheme not in ("mergelock", "params"):
            raise CorruptedKeyError(f"unknown key scheme {self.scheme!r}")
        slots = {(l, h) for l in range(self.num_layers) for h in range(self.num_heads)}
        if set(self.heads) != slots:
            raise CorruptedKeyError(f"key covers {len(self.heads)} head slots, expected {len(slots)}")
        eye = np.eye(self.d_head)
        for (l, h), t in sorted(self.heads.items()):
            for label, m, mi in (("A", t.a, t.a_inv), ("B", t.b, t.b_inv)):
                if m.shape != (self.d_head, self.d_head) or mi.shape != m.shape:
                    raise CorruptedKeyError(f"layer {l} head {h}: {label} has shape {m.shape}", layer=l, head=h)
                err = float(np.linalg.norm(m @ mi - eye))
                if not err <= KEY_TOLERANCE:
                    raise CorruptedKeyError(
                        f"layer {l} head {h}: |{label} {label}^-1 - I|_F = {err:.3e} exceeds {KEY_TOLERANCE}",
                        layer=l, head=h, deviation=err,
                    )
        if self.scheme == "params":
            for part in ("mlp_perms", "qk_diag", "vo_diag"):
                value = getattr(self, part)
                if value is None or len(value) != self.num_layers:
                    raise CorruptedKeyError(f"params key needs {part} for all {self.num_layers} layers")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for (l, h), t in sorted(self.heads.items()):
            for part in HeadTransform._fields:
                out[f"layers.{l}.heads.{h}.{part}"] = getattr(t, part)
        if self.scheme == "params":
            for l in range(self.num_layers):
                out[f"layers.{l}.mlp_perm"] = np.array(self.mlp_perms[l].map, dtype=np.float64)
                out[f"layers.{l}.qk_diag"] = self.qk_diag[l]
                out[f"layers.{l}.vo_diag"] = self.vo_diag[l]
        return out

    def geometry(self) -> dict:
        return {"d_head": self.d_head, "num_heads": self.num_heads, "num_layers": self.num_layers, "scheme": self.scheme}


def identity_key(config: ModelConfig, scheme: str = "mergelock") -> MergeLockKey:
    eye = np.eye(config.d_head)
    heads = {(l, h): HeadTransform(eye, eye, eye, eye) for l in range(config.num_layers) for h in range(config.num_heads)}
    key = MergeLockKey(scheme, config.num_layers, config.num_heads, config.d_head, heads)
    if scheme == "params":
        key.mlp_perms = [Permutation.identity(config.d_ff) for _ in range(config.num_layers)]
        key.qk_diag = [np.ones(config.d_model) for _ in range(config.num_layers)]
        key.vo_diag = [np.ones(config.d_model) for _ in range(config.num_layers)]
    return key


def serialize_key(key: MergeLockKey) -> bytes:
    key.validate()
    return _pack("key", key.geometry(), key.metadata, key.tensors(), "f64")


def write_key(path, key: MergeLockKey) -> None:
    Path(path).write_bytes(serialize_key(key))


def key_from_bytes(blob: bytes) -> MergeLockKey:
    c = unpack(blob)
    if c.kind != "key" or not isinstance(c.config, dict):
        raise SchemaError(f"expected a key file, found kind {c.kind!r}")
    try:
        g = c.config
        scheme, L, H, d = str(g["scheme"]), int(g["num_layers"]), int(g["num_heads"]), int(g["d_head"])
        heads = {
            (l, h): HeadTransform(*(c.tensors[f"layers.{l}.heads.{h}.{p}"] for p in HeadTransform._fields))
            for l in range(L)
            for h in range(H)
        }
        key = MergeLockKey(scheme, L, H, d, heads, metadata=dict(c.metadata))
        if scheme == "params":
            key.mlp_perms = [Permutation(c.tensors[f"layers.{l}.mlp_perm"].astype(np.int64)) for l in range(L)]
            key.qk_diag = [c.tensors[f"layers.{l}.qk_diag"] for l in range(L)]
            key.vo_diag = [c.tensors[f"layers.{l}.vo_diag"] for l in range(L)]
    except KeyError as exc:
        raise CorruptedKeyError(f"key file lacks entry {exc.args[0]!r}") from exc
    except Exception as exc:  # bad permutation payloads and the like
        if isinstance(exc, CorruptedKeyError):
            raise
        raise CorruptedKeyError(f"key file is malformed: {exc}") from exc
    key.validate()
    return key


def read_key(path) -> MergeLockKey:
    return key_from_bytes(Path(path).read_bytes())


def check_fingerprint(key: MergeLockKey, ckpt: Checkpoint) -> bool:
    """Warn (never raise) when ``key`` was issued for a different checkpoint."""
    expected = key.metadata.get("fingerprint")
    if expected is None:
        return True
    actual = fingerprint(ckpt)
    if actual != expected:
        warnings.warn(
            f"key fingerprint {expected[:12]}... does not match checkpoint {actual[:12]}...",
            FingerprintWarning,
            stacklevel=2,
        )
        return False
    return True


# -- task vectors ------------------------------------------------------------


class TaskVector:
    """Per-tensor deltas ``ft - pre`` sharing the base checkpoint's schema."""

    __slots__ = ("config", "deltas")

    def __init__(self, config: ModelConfig, deltas: Mapping[str, np.ndarray]):
        if list(deltas) != list(config.tensor_shapes()):
            raise SchemaError("task vector names differ from the base schema")
        self.config = config
        self.deltas = {n: _frozen(a) for n, a in deltas.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.deltas.values()])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "TaskVector":
        out, offset = {}, 0
        for name, shape in config.tensor_shapes().items():
            size = int(np.prod(shape))
            out[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return cls(config, out)


def task_vector(ft: Checkpoint, pre: Checkpoint) -> TaskVector:
    config = require_same_schema(ft, pre)
    return TaskVector(config, {n: ft[n] - pre[n] for n in pre.names()})


def apply_task_vectors(pre: Checkpoint, vectors: list[TaskVector], lam: float) -> Checkpoint:
    """``pre + lam * sum(vectors)``."""
    for tv in vectors:
        if tv.config != pre.config:
            raise SchemaError("task vector was built for a different configuration")
    out = {}
    for name in pre.names():
        total = np.zeros_like(pre[name])
        for tv in vectors:
            total = total + tv.deltas[name]
        out[name] = pre[name] + lam * total
    return Checkpoint(pre.config, out)
