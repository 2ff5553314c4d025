import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from mpokit.checkpoint import (Checkpoint, LayerSpec, ModelManifest, manifest_path_for,
                               read_checkpoint, write_checkpoint, write_manifest)
from mpokit.cli import run
from mpokit.tensor import DenseTensor


@pytest.fixture
def model_files(tmp_path):
    rng = np.random.default_rng(0)
    items = [("l0", DenseTensor.from_array(rng.standard_normal((64, 64)), "f32")),
             ("l1", DenseTensor.from_array(rng.standard_normal((96, 64)), "f32")),
             ("out", DenseTensor.from_array(rng.standard_normal((8, 96)), "f32"))]
    manifest = ModelManifest("cli-toy", [LayerSpec("l0", "dense", 64, 64, 0),
                                         LayerSpec("l1", "dense", 64, 96, 1),
                                         LayerSpec("out", "head", 96, 8)])
    ckpt_path = tmp_path / "model.safetensors"
    write_checkpoint(Checkpoint.from_items(items), ckpt_path)
    write_manifest(manifest, manifest_path_for(ckpt_path))
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"defaults": {"k": 2, "chi": 4},
                                "rules": [{"pattern": "l0", "action": "quantize", "bits": 4}]}))
    return ckpt_path, plan


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_compress_inspect_verify(model_files, tmp_path, capsys):
    ckpt, plan = model_files
    before = digest(ckpt)
    out, report = tmp_path / "c.safetensors", tmp_path / "r.csv"
    argv = ["compress", "--input", str(ckpt), "--plan", str(plan), "--output", str(out),
            "--report", str(report), "--report-format", "csv"]
    assert run(argv) == 0
    assert digest(ckpt) == before
    rows = list(csv.reader(io.StringIO(report.read_text())))
    assert len(rows) == 3 + 2
    assert {r[0]: r[1] for r in rows[1:-1]} == {"l0": "quantize", "l1": "tensorize", "out": "keep"}

    first_digest = digest(out)
    assert run(argv) == 0 and digest(out) == first_digest  # byte-identical rerun

    capsys.readouterr()
    assert run(["inspect", "--input", str(out)]) == 0
    text1 = capsys.readouterr().out
    assert run(["inspect", "--input", str(out)]) == 0
    assert capsys.readouterr().out == text1
    assert "l1.mpo.core0" in text1 and "l1.mpo" in text1

    assert run(["inspect", "--input", str(out), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert "l0.q.data" in [t["name"] for t in doc["tensors"]]

    assert run(["verify", "--original", str(ckpt), "--compressed", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("name,form") and len(lines) == 4


def test_invalid_plan_exit_2_and_no_output(model_files, tmp_path, capsys):
    ckpt, _ = model_files
    bad = tmp_path / "bad.json"
    bad.write_text('{"defaults": {"k": 3, "chi": 0}}')
    out = tmp_path / "never.safetensors"
    code = run(["compress", "--input", str(ckpt), "--plan", str(bad), "--output", str(out),
                "--json"])
    assert code == 2 and not out.exists()
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "$.defaults.chi" in err["message"]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
        ["bad.json", "model.safetensors", "model.manifest.json", "plan.json"])


def test_usage_and_missing_input(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["inspect"]) == 1
    assert run(["inspect", "--input", str(tmp_path / "missing.safetensors")]) == 2
    assert run(["inspect", "--input", str(tmp_path / "missing.safetensors"), "--json"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["exit_code"] == 2


def test_corrupt_file_exit_2(tmp_path):
    path = tmp_path / "junk.safetensors"
    path.write_bytes(b"\xff" * 16)
    assert run(["inspect", "--input", str(path)]) == 2


def test_verify_violation_exit_2(model_files, tmp_path):
    ckpt, plan = model_files
    out = tmp_path / "c.safetensors"
    assert run(["compress", "--input", str(ckpt), "--plan", str(plan), "--output", str(out)]) == 0
    c = read_checkpoint(out)
    meta = json.loads(c.metadata["l1.mpo"])
    meta.update(truncation_error=0.0, storage_error=0.0)
    c.metadata["l1.mpo"] = json.dumps(meta)
    write_checkpoint(c, out)
    assert run(["verify", "--original", str(ckpt), "--compressed", str(out)]) == 2


def test_quantize(model_files, tmp_path):
    ckpt, _ = model_files
    out = tmp_path / "q.safetensors"
    assert run(["quantize", "--input", str(ckpt), "--bits", "8", "--granularity", "per_tensor",
                "--output", str(out)]) == 0
    c = read_checkpoint(out)
    assert c.tensors["l1.q.data"].dtype.value == "i8" and c.tensors["l1.q.scales"].shape == (1,)
    assert run(["quantize", "--input", str(ckpt), "--bits", "3", "--output", str(out)]) == 1


def test_heal_demo_and_profile(tmp_path, capsys):
    metrics, model = tmp_path / "m.csv", tmp_path / "toy.safetensors"
    argv = ["heal-demo", "--seed", "1", "--chi", "4", "--cores", "3", "--epochs", "1",
            "--baseline-epochs", "2", "--n-train", "1000", "--n-test", "500",
            "--out", str(metrics), "--save-model", str(model)]
    assert run(argv) == 0
    summary = capsys.readouterr().out
    for key in ("baseline_acc=", "compressed_acc=", "healed_acc=", "param_reduction_pct="):
        assert key in summary
    first = metrics.read_bytes()
    assert run(argv) == 0 and metrics.read_bytes() == first
    rows = list(csv.reader(io.StringIO(first.decode())))
    assert rows[0] == ["phase", "epoch", "train_loss", "test_accuracy"]
    assert [r[0] for r in rows[1:]] == ["baseline", "baseline", "compressed", "heal"]

    curves = tmp_path / "curves.csv"
    pargv = ["profile", "--input", str(model), "--layers", "hidden*", "--chi-grid", "1,full",
             "--seed", "1,2", "--n-train", "1000", "--n-test", "500", "--out", str(curves)]
    assert run(pargv) == 0
    rows = list(csv.reader(io.StringIO(curves.read_text())))
    assert rows[0] == ["layer", "chi", "metric", "baseline", "seed"]
    assert len(rows) == 1 + 2 * 2 * 2
    text = curves.read_text()
    assert run(pargv) == 0 and curves.read_text() == text
    assert run(pargv[:4] + ["--layers", "nomatch*", "--out", str(curves)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mpokit", "inspect", "--input",
                           str(tmp_path / "none"), "--json"], capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr)["error"]
