"""Named-tensor binary container and model manifest.

Layout: an 8-byte little-endian header length ``L``, ``L`` bytes of UTF-8
JSON (``{name: {"dtype", "shape", "data_offsets"}}`` plus an optional
``"__metadata__"`` string map, space-padded to a multiple of 8), then the
raw little-endian payloads back to back. This is the safetensors layout.

Packed int4 tensors travel as ``U8`` byte blobs; their logical shapes are
kept under the reserved metadata key ``__i4packed__``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ArgumentError, MalformedHeaderError, NameCollisionError,
                     OffsetOverflowError, OffsetOverlapError, TruncatedFileError,
                     UnknownDTypeError)
from .tensor import DenseTensor, DType

METADATA_KEY = "__metadata__"
I4_KEY = "__i4packed__"
LAYER_KINDS = ("dense", "attention_proj", "mlp", "embedding", "head")

_WIRE = {DType.F64: "F64", DType.F32: "F32", DType.F16: "F16", DType.I8: "I8"}
_FROM_WIRE = {v: k for k, v in _WIRE.items()}
_NP_WIRE = {"F64": "<f8", "F32": "<f4", "F16": "<f2", "I8": "i1", "U8": "u1"}


def _check_name(name):
    if not isinstance(name, str) or not name or not name.isascii():
        raise ArgumentError(f"tensor names must be non-empty ASCII strings, got {name!r}")
    if name in (METADATA_KEY, I4_KEY):
        raise NameCollisionError(f"tensor name {name!r} is reserved")


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_items(cls, items, metadata=None) -> "Checkpoint":
        tensors = {}
        for name, t in items:
            if name in tensors:
                raise NameCollisionError(f"duplicate tensor name {name!r}")
            tensors[name] = t
        return cls(tensors, dict(metadata or {}))

    def validate(self):
        for name, t in self.tensors.items():
            _check_name(name)
            if not isinstance(t, DenseTensor):
                raise ArgumentError(f"{name}: expected DenseTensor, got {type(t).__name__}")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ArgumentError("metadata must map strings to strings")
            if k == I4_KEY:
                raise NameCollisionError(f"metadata key {I4_KEY!r} is reserved")

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (list(self.tensors) == list(other.tensors)
                and all(self.tensors[n] == other.tensors[n] for n in self.tensors)
                and self.metadata == other.metadata)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    header, payloads, offset = {}, [], 0
    i4_shapes = {}
    metadata = dict(ckpt.metadata)
    for name, t in ckpt.tensors.items():
        raw = t.tobytes()
        if t.dtype is DType.I4PACKED:
            wire, shape = "U8", [len(raw)]
            i4_shapes[name] = list(t.shape)
        else:
            wire, shape = _WIRE[t.dtype], list(t.shape)
        header[name] = {"dtype": wire, "shape": shape,
                        "data_offsets": [offset, offset + len(raw)]}
        payloads.append(raw)
        offset += len(raw)
    if i4_shapes:
        metadata[I4_KEY] = json.dumps(i4_shapes, separators=(",", ":"))
    if metadata:
        header = {METADATA_KEY: metadata, **header}
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(payloads)


def atomic_write_bytes(path, data: bytes) -> int:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def write_checkpoint(ckpt: Checkpoint, path) -> int:
    """Serialize ``ckpt`` to ``path``; returns bytes written."""
    return atomic_write_bytes(path, encode_checkpoint(ckpt))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise TruncatedFileError(f"file is {len(blob)} bytes, shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if hlen > len(blob) - 8:
        raise TruncatedFileError(f"header length {hlen} exceeds remaining {len(blob) - 8} bytes")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    payload = memoryview(blob)[8 + hlen:]

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()):
        raise MalformedHeaderError("__metadata__ must map strings to strings")
    metadata = dict(metadata)
    try:
        i4_shapes = json.loads(metadata.pop(I4_KEY, "{}"))
    except json.JSONDecodeError:
        raise MalformedHeaderError(f"{I4_KEY} metadata is not valid JSON") from None

    entries = []
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(f"{name}: entry needs exactly dtype, shape, data_offsets")
        wire, shape, offs = info["dtype"], info["shape"], info["data_offsets"]
        if wire not in _NP_WIRE:
            raise UnknownDTypeError(f"{name}: unknown dtype {wire!r}")
        if (not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape)
                or not isinstance(offs, list) or len(offs) != 2
                or not all(isinstance(o, int) for o in offs)):
            raise MalformedHeaderError(f"{name}: malformed shape or data_offsets")
        begin, end = offs
        if begin < 0 or end < begin or end > len(payload):
            raise OffsetOverflowError(f"{name}: data_offsets {offs} outside payload of {len(payload)} bytes")
        itemsize = np.dtype(_NP_WIRE[wire]).itemsize
        if end - begin != math.prod(shape) * itemsize:
            raise MalformedHeaderError(
                f"{name}: {end - begin} bytes do not match {wire} x {shape}")
        entries.append((begin, end, name, wire, shape))

    entries.sort()
    cursor = 0
    for begin, end, name, _, _ in entries:
        if begin < cursor:
            raise OffsetOverlapError(f"{name}: data_offsets overlap a previous tensor")
        if begin > cursor:
            raise MalformedHeaderError(f"{name}: gap in payload before offset {begin}")
        cursor = end
    if cursor != len(payload):
        raise MalformedHeaderError(f"{len(payload) - cursor} trailing payload bytes")

    tensors = {}
    for begin, end, name, wire, shape in entries:
        arr = np.frombuffer(payload[begin:end], dtype=_NP_WIRE[wire])
        try:
            if wire == "U8":
                if name not in i4_shapes:
                    raise UnknownDTypeError(f"{name}: U8 tensors are only supported as packed int4")
                tensors[name] = DenseTensor(tuple(i4_shapes[name]), DType.I4PACKED, arr)
            else:
                tensors[name] = DenseTensor(tuple(shape), _FROM_WIRE[wire],
                                            arr.astype(arr.dtype.newbyteorder("=")))
        except ArgumentError as exc:
            raise MalformedHeaderError(f"{name}: {exc}") from None
    return Checkpoint(tensors, metadata)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def inspect(path, as_json: bool = False) -> str:
    """Listing of names, dtypes, shapes, byte counts and metadata."""
    ckpt = read_checkpoint(path)
    rows = [{"name": n, "dtype": t.dtype.value, "shape": list(t.shape), "bytes": t.nbytes}
            for n, t in ckpt.tensors.items()]
    if as_json:
        doc = {"tensors": rows, "metadata": ckpt.metadata,
               "total_bytes": sum(r["bytes"] for r in rows)}
        return json.dumps(doc, indent=2, sort_keys=True)
    width = max([len(r["name"]) for r in rows] + [4])
    lines = [f"{'name':<{width}}  {'dtype':<8}  {'shape':<16}  bytes"]
    for r in rows:
        shape = "x".join(str(s) for s in r["shape"])
        lines.append(f"{r['name']:<{width}}  {r['dtype']:<8}  {shape:<16}  {r['bytes']}")
    lines.append(f"total payload bytes: {sum(r['bytes'] for r in rows)}")
    for k in sorted(ckpt.metadata):
        lines.append(f"meta {k} = {ckpt.metadata[k]}")
    return "\n".join(lines)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    input_dim: int
    output_dim: int
    block_index: int | None = None


@dataclass
class ModelManifest:
    model_name: str
    layers: list
    version: int = 1

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ArgumentError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.input_dim < 1 or layer.output_dim < 1:
                raise ArgumentError(f"layer {layer.name}: dims must be positive")
            if layer.name in seen:
                raise ArgumentError(f"duplicate manifest layer {layer.name!r}")
            seen.add(layer.name)

    def layer(self, name) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def check_against(self, ckpt: Checkpoint):
        for spec in self.layers:
            t = ckpt.tensors.get(spec.name)
            if t is None:
                raise ArgumentError(f"manifest layer {spec.name!r} has no tensor in the checkpoint")
            if t.shape != (spec.output_dim, spec.input_dim):
                raise ArgumentError(f"layer {spec.name}: tensor shape {t.shape} does not match "
                                    f"manifest ({spec.output_dim}, {spec.input_dim})")

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "version": self.version,
            "layers": [{"name": s.name, "kind": s.kind, "input_dim": s.input_dim,
                        "output_dim": s.output_dim, "block_index": s.block_index}
                       for s in self.layers],
        }

    @classmethod
    def from_dict(cls, doc) -> "ModelManifest":
        try:
            layers = [LayerSpec(d["name"], d["kind"], int(d["input_dim"]), int(d["output_dim"]),
                                d.get("block_index")) for d in doc["layers"]]
            return cls(doc["model_name"], layers, int(doc.get("version", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArgumentError(f"malformed manifest: {exc!r}") from None


def manifest_path_for(ckpt_path) -> Path:
    """``model.safetensors`` -> ``model.manifest.json``."""
    p = Path(ckpt_path)
    return p.with_name(p.with_suffix("").name + ".manifest.json")


def write_manifest(manifest: ModelManifest, path) -> int:
    text = json.dumps(manifest.to_dict(), indent=2) + "\n"
    return atomic_write_bytes(path, text.encode("utf-8"))


def read_manifest(path) -> ModelManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: manifest is not valid JSON: {exc}") from None
    return ModelManifest.from_dict(doc)
