"""Layer sensitivity profiling: sweep the bond cap of one layer at a time."""
from __future__ import annotations

import csv
import glob
import io
import logging
from dataclasses import dataclass, field
from fnmatch import fnmatchcase

from .checkpoint import Checkpoint, ModelManifest
from .errors import ArgumentError
from .mpo import IndexScheme
from .pipeline import CompressionPlan, Rule, Tensorize, compress_model

log = logging.getLogger(__name__)

FULL = "full"
CSV_COLUMNS = ("layer", "chi", "metric", "baseline", "seed")


@dataclass
class CurvePoint:
    chi: object  # int or "full"
    metric: float
    bond_cap: int
    realized_max_bond: int


@dataclass
class SensitivityCurve:
    layer_name: str
    baseline_metric: float
    evaluation_seed: int
    points: list = field(default_factory=list)
    error: str | None = None

    def metric_at(self, chi):
        return next(p.metric for p in self.points if p.chi == chi)


def parse_chi_grid(text) -> list:
    """``"1,2,4,full"`` or an iterable -> sorted, de-duplicated grid with ``full`` last."""
    items = text.split(",") if isinstance(text, str) else list(text)
    ints, full = set(), False
    for item in items:
        item = str(item).strip()
        if item == FULL:
            full = True
            continue
        try:
            value = int(item)
        except ValueError:
            raise ArgumentError(f"chi grid entry {item!r} is neither an integer nor 'full'") from None
        if value < 1:
            raise ArgumentError(f"chi grid entries must be >= 1, got {value}")
        ints.add(value)
    if not ints and not full:
        raise ArgumentError("chi grid is empty")
    return sorted(ints) + [FULL]


def _perturb(ckpt, manifest, name, cap, n_cores, store_dtype):
    action = Tensorize(n_cores, cap, store_dtype, force=True)
    plan = CompressionPlan(rules=[Rule(glob.escape(name), action)], default_exclusions=False)
    compressed, report = compress_model(ckpt, manifest, plan)
    return compressed, report.row(name)


def profile(ckpt: Checkpoint, manifest: ModelManifest, target_layers, chi_grid, evaluator,
            seed: int = 0, n_cores: int = 3, store_dtype: str = "f64") -> list:
    """One curve per target layer; only that layer is tensorized at each grid point.

    ``full`` maps to the scheme's saturating bond, so its metric equals the
    baseline up to rounding. The input checkpoint is never modified.
    """
    grid = parse_chi_grid(chi_grid)
    names = [spec.name for spec in manifest.layers]
    for name in target_layers:
        if name not in names:
            raise ArgumentError(f"target layer {name!r} not in manifest")
    baseline = float(evaluator(ckpt, manifest, seed))

    curves = []
    for name in target_layers:
        curve = SensitivityCurve(name, baseline, seed)
        shape = ckpt.tensors[name].shape
        full_cap = IndexScheme.auto(shape, n_cores).full_bond()
        try:
            for chi in grid:
                cap = full_cap if chi == FULL else chi
                perturbed, row = _perturb(ckpt, manifest, name, cap, n_cores, store_dtype)
                metric = float(evaluator(perturbed, manifest, seed))
                realized = max(row.bond_dims, default=0)
                curve.points.append(CurvePoint(chi, metric, cap, realized))
        except Exception as exc:  # evaluator failures abort only this curve
            log.warning("profile of %s aborted: %s", name, exc)
            curve.error = f"{type(exc).__name__}: {exc}"
        curves.append(curve)
    return curves


def curves_to_csv(curves) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for curve in curves:
        for p in curve.points:
            writer.writerow([curve.layer_name, p.chi, repr(p.metric), repr(curve.baseline_metric),
                             curve.evaluation_seed])
    return buf.getvalue()


def select_layers(manifest: ModelManifest, patterns) -> list:
    if isinstance(patterns, str):
        patterns = [p for p in patterns.split(",") if p]
    return [s.name for s in manifest.layers if any(fnmatchcase(s.name, p) for p in patterns)]
