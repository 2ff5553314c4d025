"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary of any run that includes this file.
"""
import time

import numpy as np
import pytest

from mpokit.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from mpokit.heal import (ToyAccuracyEvaluator, loss_and_grads, model_to_checkpoint,
                         run_heal_demo)
from mpokit.mpo import IndexScheme, apply, decompose, param_count, reconstruct
from mpokit.pipeline import model_size_gb
from mpokit.profiler import FULL, curves_to_csv, profile
from mpokit.quantization import dequantize, quantize_affine
from mpokit.tensor import DenseTensor, DType
from test_checkpoint import random_checkpoint
from test_heal import finite_difference_check, tiny_model
from test_mpo import single_cut_oracle

TOL = {np.float32: 1e-6, np.float64: 1e-12}


def fuzz_cases(seed=2024, n=200):
    """The shared corpus for criteria 2 and 3: sizes 8..64, k in {2, 3}, f32 and f64."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        m, n_ = (int(v) for v in rng.integers(8, 65, size=2))
        k = 2 + i % 2
        dtype = np.float32 if (i // 2) % 2 else np.float64
        w = rng.standard_normal((m, n_)).astype(dtype)
        cases.append((w, IndexScheme.auto((m, n_), k)))
    return cases


@pytest.fixture(scope="module")
def heal_run():
    start = time.perf_counter()
    result = run_heal_demo(seed=42, chi=4, n_cores=3, epochs=3)
    return result, time.perf_counter() - start


def test_criterion_01_parameter_formula(criterion):
    rng = np.random.default_rng(1)
    w = rng.standard_normal((216, 216))
    scheme = IndexScheme((6, 6, 6), (6, 6, 6))
    start = time.perf_counter()
    got = {chi: param_count(decompose(w, scheme, chi)) for chi in (1, 2, 4, 8, 16, 32)}
    elapsed = time.perf_counter() - start
    ok = all(n == 2 * 36 * chi + 36 * chi ** 2 for chi, n in got.items()) and elapsed < 5
    criterion(1, "216x216 param_count == 2*36*chi + 36*chi^2", ok,
              f"counts {got}, exact equality; {elapsed:.2f}s < 5s")


def test_criterion_02_full_rank_exactness(criterion):
    start = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for w, scheme in fuzz_cases():
        layer = decompose(w, scheme, scheme.full_bond())
        w64 = w.astype(np.float64)
        err = np.linalg.norm(w64 - reconstruct(layer, np.float64)) / np.linalg.norm(w64)
        worst[w.dtype.type] = max(worst[w.dtype.type], err)
    elapsed = time.perf_counter() - start
    ok = all(worst[t] <= TOL[t] for t in TOL) and elapsed < 30
    criterion(2, "TT-SVD exact at full bond on 200 matrices", ok,
              f"worst rel err f32 {worst[np.float32]:.2e} (<=1e-6), "
              f"f64 {worst[np.float64]:.2e} (<=1e-12); {elapsed:.2f}s < 30s")


def test_criterion_03_error_certificate(criterion):
    rng = np.random.default_rng(3)
    worst_gap, worst_cut, n_cut = -np.inf, 0.0, 0
    for w, scheme in fuzz_cases():
        full = scheme.full_bond()
        if full < 2:
            continue
        chi = int(rng.integers(1, full))
        w64 = w.astype(np.float64)
        # cores kept in float64 so only truncation (not storage rounding) is measured
        layer = decompose(w, scheme, chi, dtype="f64")
        err = np.linalg.norm(w64 - reconstruct(layer))
        worst_gap = max(worst_gap, err - layer.truncation_error)
        if scheme.k == 2:
            oracle = single_cut_oracle(w64, scheme.row_factors, scheme.col_factors, chi)
            worst_cut = max(worst_cut, abs(err - oracle))
            n_cut += 1
    ok = worst_gap <= 1e-8 and worst_cut <= 1e-9
    criterion(3, "error certificate ||W - W'|| <= truncation_error", ok,
              f"max(err - bound) {worst_gap:.2e} (<=1e-8); "
              f"k=2 |err - oracle| max {worst_cut:.2e} over {n_cut} cases (<=1e-9)")


def test_criterion_04_kronecker_rank_one(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        a1, a2, b1, b2 = (int(v) for v in rng.integers(1, 7, size=4))
        a, b = rng.standard_normal((a1, a2)), rng.standard_normal((b1, b2))
        w = np.kron(a, b)
        layer = decompose(w, IndexScheme((a1, b1), (a2, b2)), 1)
        worst = max(worst, float(np.linalg.norm(reconstruct(layer) - w)))
    criterion(4, "Kronecker A(x)B exact at chi=1 (50 instances)", worst <= 1e-10,
              f"max ||W - W'|| {worst:.2e} (<=1e-10, f64)")


def test_criterion_05_apply_equivalence(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        m, n = (int(v) for v in rng.integers(4, 97, size=2))
        scheme = IndexScheme.auto((m, n), int(rng.integers(2, 4)))
        dtype = np.float32 if i % 2 else np.float64
        layer = decompose(rng.standard_normal((m, n)).astype(dtype), scheme,
                          int(rng.integers(1, 9)))
        x = rng.standard_normal((n, int(rng.integers(1, 9)))).astype(dtype)
        ref = reconstruct(layer, np.float64) @ x.astype(np.float64)
        got = apply(layer, x).astype(np.float64)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    criterion(5, "apply == reconstruct @ x on 100 (layer, batch) pairs", worst <= 1e-6,
              f"worst relative difference {worst:.2e} (<=1e-6)")


def test_criterion_06_gradient_check(criterion):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        model = tiny_model(rng, seed)
        x, y = rng.standard_normal((6, 6)), rng.integers(0, 4, 6)
        try:
            worst = max(worst, finite_difference_check(model, x, y))
        except AssertionError as exc:
            failures.append((seed, str(exc)))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    criterion(6, "analytic grads == central FD (weights, biases, every core)", ok,
              f"20 models, worst rel diff {worst:.2e} (<=1e-4), failures {failures}; "
              f"{elapsed:.2f}s < 60s")


def test_criterion_07_healing_demo(criterion, heal_run):
    r, elapsed = heal_run
    gap = 100 * abs(r.healed_acc - r.baseline_acc)
    ok = (r.baseline_acc >= 0.90 and r.param_reduction_pct >= 70 and gap <= 3.0
          and r.compressed_acc <= r.baseline_acc and r.healed_acc > r.compressed_acc
          and elapsed < 300)
    criterion(7, "heal demo seed 42, k=3 chi=4, 3 healing epochs", ok,
              f"baseline {r.baseline_acc:.4f} (>=0.90), compressed {r.compressed_acc:.4f}, "
              f"healed {r.healed_acc:.4f} (gap {gap:.2f} pts <=3.0), "
              f"param reduction {r.param_reduction_pct:.2f}% (>=70); {elapsed:.1f}s < 300s")


def test_criterion_08_table1_arithmetic(criterion):
    f32 = model_size_gb(7e9, "f32")
    f16 = model_size_gb(2.1e9, "f16")
    d32, d16 = abs(f32 - 27.1) / 27.1, abs(f16 - 4.1) / 4.1
    ok = f32 == 28.0 and f16 == 4.2 and d32 <= 0.05 and d16 <= 0.05
    criterion(8, "model size rows", ok,
              f"7e9 f32 -> {f32} GB vs 27.1 ({100 * d32:.1f}%), "
              f"2.1e9 f16 -> {f16} GB vs 4.1 ({100 * d16:.1f}%), within 5%")


def test_criterion_09_quantization_bound(criterion):
    rng = np.random.default_rng(9)
    worst_excess, fixed_point = -np.inf, True
    for bits in (8, 4):
        for _ in range(1000):
            # unit-scale weight rows: the 1e-7 slack covers float32 rounding at |w| <= 1
            row = rng.uniform(-1, 1, size=(1, int(rng.integers(1, 65))))
            row *= 10 ** rng.uniform(-4, 0)
            q = quantize_affine(row, bits, "per_row")
            d = dequantize(q)
            worst_excess = max(worst_excess, float(np.max(np.abs(row - d) - q.scales[0] / 2)))
            again = quantize_affine(d, bits, "per_row")
            fixed_point &= again.qdata == q.qdata and np.array_equal(again.scales, q.scales)
    ok = worst_excess <= 1e-7 and fixed_point
    criterion(9, "|w - deq(q(w))| <= scale/2 + 1e-7, int8 and int4, 1000 rows each", ok,
              f"max(err - scale/2) {worst_excess:.2e} (<=1e-7); fixed point holds: {fixed_point}")


def test_criterion_10_profiler_contract(criterion, heal_run):
    result, _ = heal_run
    ckpt, manifest = model_to_checkpoint(result.baseline)
    before = [(n, t.tobytes()) for n, t in ckpt.tensors.items()]
    names = [s.name for s in manifest.layers]
    evaluator = ToyAccuracyEvaluator()
    runs = [profile(ckpt, manifest, names, "1,2,4,8,full", evaluator, seed=42) for _ in range(2)]
    worst = max(abs(c.metric_at(FULL) - c.baseline_metric) for c in runs[0])
    untouched = before == [(n, t.tobytes()) for n, t in ckpt.tensors.items()]
    same_csv = curves_to_csv(runs[0]) == curves_to_csv(runs[1])
    ok = worst <= 1e-6 and untouched and same_csv and all(c.error is None for c in runs[0])
    criterion(10, "profiler: full == baseline, isolation, determinism", ok,
              f"layers {names}, max |full - baseline| {worst:.1e} (<=1e-6); "
              f"input bit-identical: {untouched}; identical CSVs: {same_csv}")


def test_criterion_11_container_round_trip(criterion, tmp_path):
    rng = np.random.default_rng(11)
    identical = 0
    for i in range(100):
        ckpt = random_checkpoint(rng, int(rng.integers(0, 7)))
        p1, p2 = tmp_path / f"{i}a.safetensors", tmp_path / f"{i}b.safetensors"
        write_checkpoint(ckpt, p1)
        back = read_checkpoint(p1)
        write_checkpoint(back, p2)
        identical += back == ckpt and p1.read_bytes() == p2.read_bytes()
    one = Checkpoint.from_items([("x", DenseTensor.from_array(np.float32(1.0), DType.F32))])
    write_checkpoint(one, tmp_path / "one.safetensors")
    tail = (tmp_path / "one.safetensors").read_bytes()[-4:]
    ok = identical == 100 and tail == b"\x00\x00\x80\x3f"
    criterion(11, "write/read/write byte-identical; 1.0f32 -> 00 00 80 3F", ok,
              f"{identical}/100 byte-identical round trips; payload {tail.hex(' ')}")


def test_gradient_helper_covers_every_parameter_class():
    """Guard for criterion 6: the fuzzed models contain dense, bias and core parameters."""
    rng = np.random.default_rng(0)
    names = set()
    for seed in range(4):
        model = tiny_model(rng, seed)
        _, grads = loss_and_grads(model, rng.standard_normal((2, 6)), np.array([0, 1]))
        names |= {k.split(".")[-1].rstrip("0123456789") for k in grads}
    assert names == {"weight", "bias", "core"}
