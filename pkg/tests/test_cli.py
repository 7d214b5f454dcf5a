import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import gaussian_qkv
from sparge import cli
from sparge.errors import InvariantError
from sparge.tensor_io import peaked_qkv, tensor_load, tensor_store


@pytest.fixture
def qkv_files(tmp_path):
    q, k, v = gaussian_qkv(300, 32, 2, seed=3)
    paths = {}
    for name, x in zip("qkv", (q, k, v)):
        paths[name] = tmp_path / f"{name}.stz"
        tensor_store(x, paths[name])
    return paths


def _run_args(paths, tmp_path, *extra):
    return [
        "run", "--q", str(paths["q"]), "--k", str(paths["k"]), "--v", str(paths["v"]),
        "--out", str(tmp_path / "o.stz"), "--report", str(tmp_path / "r.json"), *extra,
    ]


def test_run_filters_off(qkv_files, tmp_path):
    assert cli.main(_run_args(qkv_files, tmp_path, "--oracle")) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert set(report) == {"sparsity", "per_head_sparsity", "relative_l1", "predict_ms", "attn_ms", "config"}
    assert report["sparsity"] == 0.0
    assert report["per_head_sparsity"] == [0.0, 0.0]
    assert report["relative_l1"] <= 1e-5
    assert report["predict_ms"] >= 0 and report["attn_ms"] >= 0
    assert tensor_load(tmp_path / "o.stz").shape == (2, 300, 32)


def test_run_with_config(qkv_files, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tau": 0.5, "theta": 0.0, "lambda": -5, "quantize": True, "b_q": 64, "b_k": 32}))
    assert cli.main(_run_args(qkv_files, tmp_path, "--config", str(cfg))) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["relative_l1"] is None
    assert report["config"]["lambda"] == -5.0 and report["config"]["quantize"] is True
    assert 0 <= report["sparsity"] <= 1


def test_run_bad_magic(qkv_files, tmp_path):
    qkv_files["q"].write_bytes(b"NOPE" + qkv_files["q"].read_bytes()[4:])
    assert cli.main(_run_args(qkv_files, tmp_path)) == 2


def test_run_missing_file(qkv_files, tmp_path):
    qkv_files["k"] = tmp_path / "missing.stz"
    assert cli.main(_run_args(qkv_files, tmp_path)) == 2


@pytest.mark.parametrize("cfg", [{"tau": 2.0}, {"c_w": 3}, {"colour": "blue"}, "not json"])
def test_run_invalid_config(qkv_files, tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    assert cli.main(_run_args(qkv_files, tmp_path, "--config", str(path))) == 2


def test_invariant_error_exit_code(qkv_files, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise InvariantError("zero denominator")

    monkeypatch.setattr(cli, "sparse_attention", boom)
    assert cli.main(_run_args(qkv_files, tmp_path)) == 3


def test_tune(tmp_path):
    calib = tmp_path / "calib"
    calib.mkdir()
    for s in range(2):
        for name, x in zip("qkv", peaked_qkv(512, 32, 1, seed=s, segment=64)):
            tensor_store(x, calib / f"s{s}.{name}.stz")
    cfg = tmp_path / "base.json"
    cfg.write_text(json.dumps({"b_q": 64, "b_k": 32}))
    out = tmp_path / "params.json"
    code = cli.main([
        "tune", "--calib", str(calib), "--l1", "0.05", "--l2", "0.06", "--config", str(cfg),
        "--tau-grid", "0.5,0.8,1.0", "--theta-grid", "disabled,0.8", "--lambda-grid=-inf,-10", "--out", str(out),
    ])
    assert code == 0
    params = json.loads(out.read_text())
    assert params["achieved_l1_stage1"] < 0.05 and params["achieved_l1_stage2"] < 0.06
    assert params["achieved_sparsity"] > 0.2


def test_tune_bad_bounds(tmp_path):
    calib = tmp_path / "calib"
    calib.mkdir()
    for name, x in zip("qkv", gaussian_qkv(64, 8)):
        tensor_store(x, calib / f"a.{name}.stz")
    assert cli.main(["tune", "--calib", str(calib), "--l1", "0.1", "--l2", "0.05", "--out", str(tmp_path / "p.json")]) == 2


def test_permute_eval(tmp_path):
    report = tmp_path / "perm.json"
    assert cli.main(["permute-eval", "--dims", "2,16,16", "--d", "32", "--seed", "1", "--report", str(report)]) == 0
    rows = json.loads(report.read_text())["rows"]
    assert [r["method"] for r in rows] == ["random", "rowmajor", "colmajor", "timemajor", "hilbert"]
    best = max(rows, key=lambda r: r["sim_k"])
    assert best["method"] == "hilbert"


def test_permute_eval_bad_dims(tmp_path):
    assert cli.main(["permute-eval", "--dims", "2,16", "--report", str(tmp_path / "p.json")]) == 2


def test_bench_small(tmp_path):
    report = tmp_path / "bench.json"
    assert cli.main(["bench", "--lens", "512,1024", "--d", "32", "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert [r["seq_len"] for r in data["rows"]] == [512, 1024]
    assert all(r["overhead"] > 0 for r in data["rows"])
    assert isinstance(data["overhead_strictly_decreasing"], bool)


def test_bench_bad_lens(tmp_path):
    assert cli.main(["bench", "--lens", "8k", "--report", str(tmp_path / "b.json")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sparge.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "permute-eval" in proc.stdout
