import json
import subprocess
import sys

import numpy as np
import pytest

from refir.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from refir.evalkit.corpus import write_corpus
from refir.images import load_image, save_image
from refir.restorer import save_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, perturbed_model):
    root = tmp_path_factory.mktemp("cli")
    write_corpus(root / "db", 6, size=16, seed=1)
    write_corpus(root / "hq", 2, size=16, seed=2)
    save_checkpoint(perturbed_model, root / "model.ckpt")
    return root


def test_help_entry_point():
    out = subprocess.run([sys.executable, "-m", "refir.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "restore" in out.stdout


def test_index_and_retrieve(workspace, capsys):
    idx = workspace / "db.rfix"
    assert main(["index", "--db", str(workspace / "db"), "--out", str(idx)]) == EXIT_OK
    assert idx.read_bytes()[:4] == b"RFIX"
    assert main(["retrieve", "--index", str(idx), "--query", str(workspace / "db/tex0003.png"), "-k", "2"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[-2].split()[0] == "1" and lines[-2].split()[2] == "tex0003"
    assert abs(float(lines[-2].split()[1]) - 1.0) < 1e-6


def test_degrade(workspace):
    out = workspace / "lq"
    assert main(["degrade", "--hq", str(workspace / "hq"), "--out", str(out), "--seed", "0"]) == EXIT_OK
    assert load_image(out / "tex0000.png").shape == (3, 4, 4)


def test_restore_with_sidecar(workspace):
    lq = workspace / "lq1.png"
    save_image(lq, np.random.default_rng(0).random((3, 4, 4)))
    out = workspace / "restored.png"
    args = ["restore", "--lq", str(lq), "--model", str(workspace / "model.ckpt"), "--provider", "hq",
            "--hq", str(workspace / "hq/tex0000.png"), "--steps", "6", "--window", "3", "--out", str(out)]
    assert main(args) == EXIT_OK
    assert load_image(out).shape == (3, 16, 16)
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["reference_ids"] == ["tex0000"] and meta["trace"]["fired"] == 6


def test_restore_retrieved_and_fallback(workspace):
    idx = workspace / "db2.rfix"
    main(["index", "--db", str(workspace / "db"), "--out", str(idx)])
    lq = workspace / "lq2.png"
    save_image(lq, np.random.default_rng(1).random((3, 4, 4)))
    base = ["restore", "--lq", str(lq), "--model", str(workspace / "model.ckpt"), "--steps", "4",
            "--window", "2", "--index", str(idx), "--pool", str(workspace / "db")]
    assert main(base + ["--provider", "retrieved", "-k", "2", "--out", str(workspace / "r.png")]) == EXIT_OK
    assert len(json.loads((workspace / "r.json").read_text())["reference_ids"]) == 2
    assert main(base + ["--fallback", "none,self,retrieved", "--out", str(workspace / "f.png")]) == EXIT_OK
    assert json.loads((workspace / "f.json").read_text())["strategy"] in ("none", "self", "retrieved")


def test_eval(workspace, capsys):
    cfg = workspace / "grid.cfg"
    cfg.write_text(f"data = {workspace / 'hq'}\ncheckpoint = {workspace / 'model.ckpt'}\n"
                   "providers = none, hq\nscales = 0.5\nsteps = 4\nwindow = 2\nfactor = 4\n")
    assert main(["eval", "--config", str(cfg), "--out", str(workspace / "eval")]) == EXIT_OK
    assert len((workspace / "eval/results.csv").read_text().splitlines()) == 3
    assert (workspace / "eval/manifest.json").exists()


def test_corpus(tmp_path):
    assert main(["corpus", "--out", str(tmp_path), "-n", "2", "--size", "16"]) == EXIT_OK
    assert len(list(tmp_path.glob("*.png"))) == 2


@pytest.mark.parametrize("argv, code", [
    (["frobnicate"], EXIT_USAGE),
    (["retrieve", "--index", "x"], EXIT_USAGE),
    (["index", "--db", "/nonexistent/dir", "--out", "/tmp/x.rfix"], EXIT_DATA),
    (["retrieve", "--index", "/nonexistent.rfix", "--query", "/nonexistent.png"], EXIT_DATA),
    (["eval", "--config", "/nonexistent.cfg", "--out", "/tmp/o"], EXIT_USAGE),
])
def test_exit_codes(argv, code):
    assert main(argv) == code


def test_restore_usage_errors(workspace):
    lq = workspace / "lq3.png"
    save_image(lq, np.zeros((3, 4, 4)))
    base = ["restore", "--lq", str(lq), "--model", str(workspace / "model.ckpt"), "--out", str(workspace / "x.png")]
    assert main(base + ["--scale", "2"]) == EXIT_USAGE
    assert main(base + ["--sites", "dec.99"]) == EXIT_USAGE
    assert main(base + ["--provider", "hq"]) == EXIT_USAGE
    assert main(base + ["--provider", "hq", "--hq", str(workspace / "missing.png")]) == EXIT_DATA
    assert main(["restore", "--lq", str(lq), "--model", str(workspace / "nope.ckpt"), "--out", "x.png"]) == EXIT_DATA


def test_eval_missing_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data = {tmp_path / 'none'}\ncheckpoint = {tmp_path / 'none.ckpt'}\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA
