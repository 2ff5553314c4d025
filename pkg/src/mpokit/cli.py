"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint as ckio
from .errors import MpokitError, NumericalError, VerificationError
from .heal import ToyAccuracyEvaluator, history_csv, model_to_checkpoint, run_heal_demo
from .pipeline import (CompressionPlan, Quantize, Rule, compress_model, emit_report, parse_plan,
                       synthetic_manifest, verify_compressed)
from .profiler import curves_to_csv, profile, select_layers

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_text(path, text: str):
    ckio.atomic_write_bytes(path, text.encode("utf-8"))


def _manifest(args):
    path = args.manifest or ckio.manifest_path_for(args.input)
    return ckio.read_manifest(path)


def cmd_compress(args):
    plan = parse_plan(Path(args.plan).read_text(encoding="utf-8"))
    ckpt = ckio.read_checkpoint(args.input)
    manifest = _manifest(args)
    compressed, report = compress_model(ckpt, manifest, plan, workers=args.workers)
    report_text = emit_report(report, args.report_format)
    ckio.write_checkpoint(compressed, args.output)
    if args.report:
        _write_text(args.report, report_text)
    t = report.totals
    print(f"params {t['params_before']} -> {t['params_after']} "
          f"({t['parameter_reduction_pct']:.2f}% fewer); bytes {t['bytes_before']} -> "
          f"{t['bytes_after']} ({t['byte_reduction_pct']:.2f}% smaller)")
    return EXIT_OK


def cmd_inspect(args):
    print(ckio.inspect(args.input, as_json=args.json))
    return EXIT_OK


def cmd_verify(args):
    rows = verify_compressed(ckio.read_checkpoint(args.original),
                             ckio.read_checkpoint(args.compressed), strict=False)
    if args.json:
        print(json.dumps([r.__dict__ for r in rows], indent=2))
    else:
        print("name,form,rel_error,abs_error,bound,ok")
        for r in rows:
            bound = "" if r.bound is None else repr(r.bound)
            print(f"{r.name},{r.form},{r.rel_error!r},{r.abs_error!r},{bound},{r.ok}")
    bad = [r.name for r in rows if not r.ok]
    if bad:
        raise VerificationError(f"error bound violated for {', '.join(bad)}")
    return EXIT_OK


def cmd_profile(args):
    ckpt = ckio.read_checkpoint(args.input)
    manifest = _manifest(args)
    layers = select_layers(manifest, args.layers)
    if not layers:
        raise UsageError(f"--layers {args.layers!r} matches no manifest layer")
    evaluator = ToyAccuracyEvaluator(args.n_train, args.n_test)
    seeds = [int(s) for s in str(args.seed).split(",") if s]
    text = ""
    for i, seed in enumerate(seeds):
        curves = profile(ckpt, manifest, layers, args.chi_grid, evaluator, seed, args.cores)
        for c in curves:
            if c.error:
                print(f"warning: curve for {c.layer_name} aborted: {c.error}", file=sys.stderr)
        csv_text = curves_to_csv(curves)
        text += csv_text if i == 0 else csv_text.split("\n", 1)[1]
    _write_text(args.out, text)
    print(f"wrote {text.count(chr(10)) - 1} rows to {args.out}")
    return EXIT_OK


def cmd_heal_demo(args):
    result = run_heal_demo(seed=args.seed, chi=args.chi, n_cores=args.cores, epochs=args.epochs,
                           baseline_epochs=args.baseline_epochs, n_train=args.n_train,
                           n_test=args.n_test, pattern=args.tensorize,
                           learning_rate=args.lr)
    _write_text(args.out, history_csv(result.history))
    if args.save_model:
        ckpt, manifest = model_to_checkpoint(result.baseline)
        ckio.write_checkpoint(ckpt, args.save_model)
        ckio.write_manifest(manifest, ckio.manifest_path_for(args.save_model))
    print(result.summary())
    return EXIT_OK


def cmd_quantize(args):
    ckpt = ckio.read_checkpoint(args.input)
    manifest = synthetic_manifest(ckpt)
    plan = CompressionPlan(rules=[Rule("*", Quantize(args.bits, args.granularity))],
                           default_exclusions=False)
    compressed, report = compress_model(ckpt, manifest, plan)
    ckio.write_checkpoint(compressed, args.output)
    t = report.totals
    print(f"quantized {len(report.rows)} tensors; bytes {t['bytes_before']} -> {t['bytes_after']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpokit", description="MPO compression toolkit for weight matrices")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--json", action="store_true", help="JSON output and JSON errors")
        return p

    p = add("compress", cmd_compress, "apply a compression plan to a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest", help="defaults to the <model>.manifest.json sidecar")
    p.add_argument("--plan", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.add_argument("--report-format", choices=("json", "csv"), default="json")
    p.add_argument("--workers", type=int, default=1)

    p = add("inspect", cmd_inspect, "list tensors, dtypes, shapes and metadata")
    p.add_argument("--input", required=True)

    p = add("verify", cmd_verify, "check a compressed checkpoint against its original")
    p.add_argument("--original", required=True)
    p.add_argument("--compressed", required=True)

    p = add("profile", cmd_profile, "layer sensitivity sweep over bond dimensions")
    p.add_argument("--input", required=True)
    p.add_argument("--manifest")
    p.add_argument("--layers", required=True, help="comma-separated globs over layer names")
    p.add_argument("--chi-grid", default="1,2,4,8,full")
    p.add_argument("--seed", default="0", help="seed or comma-separated seeds")
    p.add_argument("--cores", type=int, default=3)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = add("heal-demo", cmd_heal_demo, "train, tensorize and heal a toy classifier")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--chi", type=int, default=4)
    p.add_argument("--cores", type=int, default=3)
    p.add_argument("--epochs", type=int, default=3, help="healing epochs")
    p.add_argument("--baseline-epochs", type=int, default=10)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tensorize", default="hidden[1-9]*", help="glob of layers to tensorize")
    p.add_argument("--save-model", help="also write the dense baseline checkpoint + manifest")
    p.add_argument("--out", required=True)

    p = add("quantize", cmd_quantize, "quantize every matrix in a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--bits", type=int, choices=(4, 8), required=True)
    p.add_argument("--granularity", choices=("per_row", "per_tensor"), default="per_row")
    p.add_argument("--output", required=True)
    return parser


def _fail(code, category, message, as_json):
    if as_json:
        print(json.dumps({"error": category, "message": message, "exit_code": code}),
              file=sys.stderr)
    else:
        print(f"error: {message}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        if not as_json:
            parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", str(exc), as_json)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, str(exc), as_json)
    except (MpokitError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc), as_json)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
