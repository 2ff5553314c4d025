"""Declarative compression plans applied over a checkpoint.

Each manifest layer gets exactly one disposition: tensorize (MPO cores),
quantize (affine int8/int4) or keep. Exclusion globs override every rule;
among rules the first match wins.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fnmatch import fnmatchcase

import jsonschema
import numpy as np

from .checkpoint import Checkpoint, LayerSpec, ModelManifest
from .errors import ArgumentError, MpokitError, PlanError, VerificationError
from .mpo import IndexScheme, MpoLayer, decompose, param_count, reconstruct
from .quantization import QuantizedTensor, dequantize, quantize_affine
from .tensor import DenseTensor, DType, as_array

log = logging.getLogger(__name__)

PLAN_SCHEMA_VERSION = 1
STORE_DTYPES = ("f64", "f32", "f16")
DEFAULT_EXCLUDED_KINDS = ("embedding", "head")

_CHI = {"oneOf": [{"type": "integer", "minimum": 1},
                  {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}]}
_FACTORS = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

PLAN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema": {"const": PLAN_SCHEMA_VERSION},
        "defaults": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "chi": _CHI,
                "store_dtype": {"enum": list(STORE_DTYPES)},
                "rel_tol": {"type": "number", "minimum": 0},
            },
        },
        "rules": {"type": "array", "items": {
            "type": "object",
            "required": ["pattern", "action"],
            "properties": {"pattern": {"type": "string", "minLength": 1},
                           "action": {"enum": ["tensorize", "quantize", "keep"]}},
        }},
        "exclusions": {"type": "array", "items": {"type": "string", "minLength": 1}},
        "default_exclusions": {"type": "boolean"},
        "fallback": {"enum": ["tensorize", "keep"]},
    },
}

_ACTION_SCHEMAS = {
    "keep": {"type": "object", "additionalProperties": False,
             "properties": {"pattern": {}, "action": {}}},
    "tensorize": {
        "type": "object", "additionalProperties": False,
        "properties": {
            "pattern": {}, "action": {},
            "k": {"type": "integer", "minimum": 1},
            "chi": _CHI,
            "scheme": {"type": "object", "additionalProperties": False,
                       "required": ["row_factors", "col_factors"],
                       "properties": {"row_factors": _FACTORS, "col_factors": _FACTORS}},
            "store_dtype": {"enum": list(STORE_DTYPES)},
            "rel_tol": {"type": "number", "minimum": 0},
        },
    },
    "quantize": {
        "type": "object", "additionalProperties": False, "required": ["bits"],
        "properties": {"pattern": {}, "action": {},
                       "bits": {"enum": [4, 8]},
                       "granularity": {"enum": ["per_row", "per_tensor"]}},
    },
}


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _validate(doc, schema, prefix=()):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path, msg = list(err.absolute_path) + extra[:1], "unknown key"
        else:
            path, msg = list(err.absolute_path), err.message
        raise PlanError(msg, _json_path(list(prefix) + path))


@dataclass(frozen=True)
class Keep:
    name = "keep"


@dataclass(frozen=True)
class Tensorize:
    k: int
    chi: object
    store_dtype: str = "f16"
    rel_tol: float = 0.0
    scheme: IndexScheme | None = None
    force: bool = False  # skip the no-inflation fallback (profiling probes)
    name = "tensorize"


@dataclass(frozen=True)
class Quantize:
    bits: int
    granularity: str = "per_row"
    name = "quantize"


@dataclass(frozen=True)
class Rule:
    pattern: str
    action: object


@dataclass(frozen=True)
class Defaults:
    k: int = 3
    chi: object = None
    store_dtype: str = "f16"
    rel_tol: float = 0.0


@dataclass
class CompressionPlan:
    rules: list = field(default_factory=list)
    defaults: Defaults = field(default_factory=Defaults)
    exclusions: list = field(default_factory=list)
    default_exclusions: bool = True
    fallback: str = "keep"

    def default_action(self) -> Tensorize:
        d = self.defaults
        if d.chi is None:
            raise PlanError("fallback 'tensorize' needs defaults.chi", "$.defaults.chi")
        return Tensorize(d.k, d.chi, d.store_dtype, d.rel_tol)

    def disposition(self, spec, manifest: ModelManifest):
        """(action, reason) for one manifest layer."""
        if self.default_exclusions and spec.name in default_excluded_layers(manifest):
            return Keep(), "default exclusion"
        for pattern in self.exclusions:
            if fnmatchcase(spec.name, pattern):
                return Keep(), f"excluded by {pattern!r}"
        for rule in self.rules:
            if fnmatchcase(spec.name, rule.pattern):
                return rule.action, f"rule {rule.pattern!r}"
        if self.fallback == "tensorize":
            return self.default_action(), "plan defaults"
        return Keep(), "no matching rule"


def default_excluded_layers(manifest: ModelManifest) -> set:
    """Embedding and head layers plus the last MLP layer of every block."""
    out = {s.name for s in manifest.layers if s.kind in DEFAULT_EXCLUDED_KINDS}
    last_mlp = {}
    for s in manifest.layers:
        if s.kind == "mlp" and s.block_index is not None:
            last_mlp[s.block_index] = s.name
    return out | set(last_mlp.values())


def parse_plan(text) -> CompressionPlan:
    """Validate plan JSON (str or already-parsed dict) and build a plan."""
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PlanError(f"invalid JSON: {exc}") from None
    else:
        doc = text
    _validate(doc, PLAN_SCHEMA)

    d = doc.get("defaults", {})
    defaults = Defaults(k=d.get("k", 3), chi=_chi(d.get("chi")),
                        store_dtype=d.get("store_dtype", "f16"), rel_tol=float(d.get("rel_tol", 0.0)))
    rules = []
    for i, r in enumerate(doc.get("rules", [])):
        _validate(r, _ACTION_SCHEMAS[r["action"]], ("rules", i))
        rules.append(Rule(r["pattern"], _build_action(r, defaults, ("rules", i))))
    fallback = doc.get("fallback", "tensorize" if "defaults" in doc else "keep")
    plan = CompressionPlan(rules, defaults, list(doc.get("exclusions", [])),
                           bool(doc.get("default_exclusions", True)), fallback)
    if fallback == "tensorize":
        plan.default_action()
    return plan


def _chi(value):
    return tuple(value) if isinstance(value, list) else value


def _build_action(r, defaults: Defaults, path):
    if r["action"] == "keep":
        return Keep()
    if r["action"] == "quantize":
        return Quantize(r["bits"], r.get("granularity", "per_row"))
    chi = _chi(r.get("chi", defaults.chi))
    if chi is None:
        raise PlanError("tensorize needs chi (in the rule or in defaults)", _json_path(list(path) + ["chi"]))
    scheme = None
    if "scheme" in r:
        try:
            scheme = IndexScheme(r["scheme"]["row_factors"], r["scheme"]["col_factors"])
        except ArgumentError as exc:
            raise PlanError(str(exc), _json_path(list(path) + ["scheme"])) from None
    k = scheme.k if scheme is not None else r.get("k", defaults.k)
    if isinstance(chi, tuple) and len(chi) != k - 1:
        raise PlanError(f"per-bond chi needs {k - 1} entries", _json_path(list(path) + ["chi"]))
    return Tensorize(k, chi, r.get("store_dtype", defaults.store_dtype),
                     float(r.get("rel_tol", defaults.rel_tol)), scheme)


# ---------------------------------------------------------------- report

CSV_COLUMNS = ("name", "action", "params_before", "params_after", "bytes_before",
               "bytes_after", "rel_error", "bond_dims")


@dataclass
class LayerRow:
    name: str
    action: str
    params_before: int
    params_after: int
    bytes_before: int
    bytes_after: int
    rel_frobenius_error: float
    bond_dims: tuple = ()
    note: str = ""


def _pct(before, after):
    return 100.0 * (1.0 - after / before) if before else 0.0


@dataclass
class CompressionReport:
    rows: list

    @property
    def totals(self) -> dict:
        pb = sum(r.params_before for r in self.rows)
        pa = sum(r.params_after for r in self.rows)
        bb = sum(r.bytes_before for r in self.rows)
        ba = sum(r.bytes_after for r in self.rows)
        return {"params_before": pb, "params_after": pa, "bytes_before": bb, "bytes_after": ba,
                "parameter_reduction_pct": _pct(pb, pa), "byte_reduction_pct": _pct(bb, ba)}

    def row(self, name) -> LayerRow:
        return next(r for r in self.rows if r.name == name)


def emit_report(report: CompressionReport, fmt: str = "json") -> str:
    if fmt == "json":
        rows = []
        for r in report.rows:
            d = asdict(r)
            d["bond_dims"] = list(r.bond_dims)
            rows.append(d)
        return json.dumps({"layers": rows, "totals": report.totals}, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in report.rows:
            writer.writerow([r.name, r.action, r.params_before, r.params_after, r.bytes_before,
                             r.bytes_after, repr(r.rel_frobenius_error),
                             "x".join(str(b) for b in r.bond_dims)])
        t = report.totals
        writer.writerow(["TOTAL", "", t["params_before"], t["params_after"],
                         t["bytes_before"], t["bytes_after"], "", ""])
        return buf.getvalue()
    raise ArgumentError(f"unknown report format {fmt!r}")


BYTES_PER_PARAM = {"f64": 8, "f32": 4, "f16": 2, "i8": 1, "i4": 0.5}


def model_size_bytes(n_params, dtype: str) -> float:
    """Raw weight payload for a uniform-precision model (no scale overhead)."""
    return n_params * BYTES_PER_PARAM[dtype]


def model_size_gb(n_params, dtype: str) -> float:
    return model_size_bytes(n_params, dtype) / 1e9


# ------------------------------------------------------------- compress

def _rel_error(original: np.ndarray, approx: np.ndarray) -> float:
    norm = float(np.linalg.norm(original))
    diff = float(np.linalg.norm(original - approx))
    return diff / norm if norm > 0 else diff


def mpo_metadata(layer: MpoLayer, storage_error: float) -> str:
    chi = list(layer.max_bond) if not np.isscalar(layer.max_bond) else int(layer.max_bond)
    return json.dumps({
        "row_factors": list(layer.scheme.row_factors),
        "col_factors": list(layer.scheme.col_factors),
        "bond_dims": list(layer.bond_dims),
        "max_bond": chi,
        "truncation_error": layer.truncation_error,
        "storage_error": storage_error,
        "dtype": layer.dtype.value,
    }, separators=(",", ":"))


def _tensorize(name, w, action: Tensorize):
    scheme = action.scheme or IndexScheme.auto(w.shape, action.k)
    if scheme.shape != w.shape:
        raise ArgumentError(f"scheme {scheme.row_factors}/{scheme.col_factors} "
                            f"does not factor shape {w.shape}")
    before = w.shape[0] * w.shape[1]
    if not action.force and (scheme.k < 2 or scheme.estimate_params(action.chi) >= before):
        return None
    exact = decompose(w, scheme, action.chi, action.rel_tol, dtype=DType.F64)
    store = DType.parse(action.store_dtype)
    stored = MpoLayer([c.astype(store.numpy_dtype) for c in exact.cores],
                      scheme, exact.max_bond, exact.original_shape, exact.truncation_error, store)
    approx = reconstruct(stored, dtype=np.float64)
    storage_error = float(np.linalg.norm(reconstruct(exact) - approx))
    tensors = [(f"{name}.mpo.core{i}", DenseTensor.from_array(c, stored.dtype))
               for i, c in enumerate(stored.cores)]
    return tensors, {f"{name}.mpo": mpo_metadata(stored, storage_error)}, stored, approx


def _quantize(name, w, action: Quantize):
    q = quantize_affine(w, action.bits, action.granularity)
    tensors = [(f"{name}.q.data", q.qdata),
               (f"{name}.q.scales", DenseTensor.from_array(q.scales, DType.F32))]
    meta = json.dumps({"bits": q.bits, "granularity": q.granularity,
                       "original_shape": list(q.original_shape)}, separators=(",", ":"))
    return tensors, {f"{name}.q": meta}, q, dequantize(q).astype(np.float64)


def _process_layer(spec, tensor: DenseTensor, action, reason):
    name = spec.name
    w = as_array(tensor).astype(np.float64)
    before_params, before_bytes = tensor.numel, tensor.nbytes
    keep = ([(name, tensor)], {}, LayerRow(name, "keep", before_params, before_params,
                                           before_bytes, before_bytes, 0.0, (), reason))
    if isinstance(action, Keep):
        return keep
    try:
        if isinstance(action, Tensorize):
            result = _tensorize(name, w, action)
            if result is None:
                log.warning("%s: tensorize would not reduce parameters; keeping", name)
                row = keep[2]
                row.note = f"fallback to keep: {reason} cannot reduce {tensor.shape} with k={action.k}"
                return keep
            tensors, meta, layer, approx = result
            row = LayerRow(name, "tensorize", before_params, param_count(layer), before_bytes,
                           sum(t.nbytes for _, t in tensors), _rel_error(w, approx),
                           layer.bond_dims, reason)
            if spec.block_index == 0 and row.params_after < 0.5 * before_params:
                row.note += "; early block compressed below 50% of its parameters"
            return tensors, meta, row
        tensors, meta, q, approx = _quantize(name, w, action)
        row = LayerRow(name, "quantize", before_params, before_params, before_bytes,
                       sum(t.nbytes for _, t in tensors), _rel_error(w, approx), (), reason)
        return tensors, meta, row
    except MpokitError as exc:
        exc.args = (f"layer {name}: {exc}",)
        raise


def compress_model(ckpt: Checkpoint, manifest: ModelManifest, plan: CompressionPlan,
                   workers: int = 1):
    """Apply ``plan``; returns (compressed checkpoint, CompressionReport).

    Output is identical for any ``workers`` value: per-layer work is pure
    and results are assembled in checkpoint order.
    """
    manifest.check_against(ckpt)
    jobs = []
    for spec in manifest.layers:
        action, reason = plan.disposition(spec, manifest)
        jobs.append((spec, ckpt.tensors[spec.name], action, reason))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _process_layer(*j), jobs))
    else:
        results = [_process_layer(*j) for j in jobs]
    by_name = {spec.name: res for (spec, *_), res in zip(jobs, results)}

    tensors, metadata = [], dict(ckpt.metadata)
    for name, t in ckpt.tensors.items():
        if name in by_name:
            new_tensors, meta, _ = by_name[name]
            tensors.extend(new_tensors)
            metadata.update(meta)
        else:
            tensors.append((name, t))
    out = Checkpoint.from_items(tensors, metadata)
    return out, CompressionReport([res[2] for res in results])


# --------------------------------------------------------- load / verify

def mpo_from_checkpoint(ckpt: Checkpoint, name: str) -> MpoLayer:
    meta = json.loads(ckpt.metadata[f"{name}.mpo"])
    scheme = IndexScheme(meta["row_factors"], meta["col_factors"])
    cores = [as_array(ckpt.tensors[f"{name}.mpo.core{i}"], widen=False) for i in range(scheme.k)]
    chi = meta["max_bond"]
    layer = MpoLayer([np.asarray(c) for c in cores], scheme,
                     tuple(chi) if isinstance(chi, list) else chi,
                     scheme.shape, meta["truncation_error"], meta["dtype"])
    if list(layer.bond_dims) != meta["bond_dims"]:
        raise ArgumentError(f"{name}: core bonds {layer.bond_dims} disagree with metadata")
    return layer


def quantized_from_checkpoint(ckpt: Checkpoint, name: str) -> QuantizedTensor:
    meta = json.loads(ckpt.metadata[f"{name}.q"])
    scales = as_array(ckpt.tensors[f"{name}.q.scales"]).astype(np.float32)
    return QuantizedTensor(ckpt.tensors[f"{name}.q.data"], scales,
                           np.zeros(scales.shape, dtype=np.int64),
                           tuple(meta["original_shape"]), meta["bits"], meta["granularity"])


def layer_form(ckpt: Checkpoint, name: str) -> str:
    if name in ckpt.tensors:
        return "dense"
    if f"{name}.mpo" in ckpt.metadata:
        return "mpo"
    if f"{name}.q" in ckpt.metadata:
        return "quantized"
    raise KeyError(name)


def load_weight(ckpt: Checkpoint, name: str) -> np.ndarray:
    """Dense float64 weight for ``name`` whatever its stored form."""
    form = layer_form(ckpt, name)
    if form == "dense":
        return as_array(ckpt.tensors[name]).astype(np.float64)
    if form == "mpo":
        return reconstruct(mpo_from_checkpoint(ckpt, name), dtype=np.float64)
    return dequantize(quantized_from_checkpoint(ckpt, name)).astype(np.float64)


@dataclass
class VerifyRow:
    name: str
    form: str
    rel_error: float
    abs_error: float
    bound: float | None
    ok: bool


def verify_compressed(original: Checkpoint, compressed: Checkpoint, strict: bool = True):
    """Per-tensor reconstruction errors of ``compressed`` against ``original``.

    MPO layers must satisfy ||W - W'|| <= truncation_error + storage_error;
    with ``strict`` a violation raises VerificationError.
    """
    rows = []
    for name, t in original.tensors.items():
        try:
            form = layer_form(compressed, name)
        except KeyError:
            raise VerificationError(f"no counterpart for tensor {name!r} in compressed checkpoint") from None
        w = as_array(t).astype(np.float64)
        if form == "dense":
            other = compressed.tensors[name]
            approx = as_array(other).astype(np.float64)
            if approx.shape != w.shape:
                raise VerificationError(f"{name}: shape {approx.shape} != {w.shape}")
        else:
            approx = load_weight(compressed, name)
        abs_err = float(np.linalg.norm(w - approx))
        bound, ok = None, True
        if form == "mpo":
            meta = json.loads(compressed.metadata[f"{name}.mpo"])
            bound = meta["truncation_error"] + meta.get("storage_error", 0.0)
            ok = abs_err <= bound + 1e-9 * float(np.linalg.norm(w)) + 1e-12
        rows.append(VerifyRow(name, form, _rel_error(w, approx), abs_err, bound, ok))
    bad = [r.name for r in rows if not r.ok]
    if strict and bad:
        raise VerificationError(f"error bound violated for {', '.join(bad)}")
    return rows


def synthetic_manifest(ckpt: Checkpoint, model_name: str = "checkpoint") -> ModelManifest:
    """Treat every rank-2 float tensor as a dense layer."""
    layers = [LayerSpec(n, "dense", t.shape[1], t.shape[0])
              for n, t in ckpt.tensors.items() if t.rank == 2 and t.dtype.is_float]
    return ModelManifest(model_name, layers)
