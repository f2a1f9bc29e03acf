import io
import json

import pytest

from repkit.cli import main
from repkit.signal import load_stream

SMALL = {"model": {"conv_blocks": [[8, 5]], "gru_hidden": 8, "fc_dims": [8, 8]},
         "phase1": {"epochs": 1, "batches_per_epoch": 2, "batch_size": 16},
         "phase2": {"epochs": 1, "batches_per_epoch": 2, "batch_size": 16},
         "phase3": {"epochs": 2}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    corpus = root / "corpus"
    assert main(["synth", "--exercises", "2", "--subjects", "1", "--sets", "2", "--reps", "6",
                 "--seed", "3", "--out", str(corpus)]) == 0
    ckpt = root / "base.npz"
    assert main(["train", "--corpus", str(corpus), "--holdout", "ex01", "--checkpoint", str(ckpt),
                 "--config", str(cfg), "--seed", "1"]) == 0
    return root, cfg, corpus, ckpt


def test_synth_and_train_outputs(workspace):
    root, _, corpus, ckpt = workspace
    assert (corpus / "manifest.csv").exists()
    assert ckpt.exists()
    assert (root / "base.phase1.log").read_text().startswith("epoch,loss,accuracy\n")
    assert json.loads((root / "base.manifest.json").read_text())["exercises"] == ["ex00"]


def test_register_and_count(workspace, capsys):
    root, cfg, corpus, ckpt = workspace
    out = root / "reg"
    assert main(["register", "--checkpoint", str(ckpt), "--stream", str(corpus / "ex01_s00_set0.csv"),
                 "--out", str(out), "--config", str(cfg)]) == 0
    assert (out / "support.npz").exists() and (out / "adapted.npz").exists()
    capsys.readouterr()

    test_file = corpus / "ex01_s00_set1.csv"
    args = ["--checkpoint", str(out / "adapted.npz"), "--support", str(out / "support.npz"), "--seed", "5"]
    assert main(["count", str(test_file)] + args) == 0
    batch = capsys.readouterr().out.strip()
    assert batch.startswith("predicted=") and batch.endswith("true=6")
    predicted = int(batch.split()[0].split("=")[1])

    lines = [l for l in test_file.read_text().splitlines() if not l.startswith("#")]
    stdin = io.StringIO("\n".join(lines) + "\n")
    import sys
    old, sys.stdin = sys.stdin, stdin
    try:
        assert main(["count", "--stream"] + args) == 0
    finally:
        sys.stdin = old
    out_lines = capsys.readouterr().out.strip().splitlines()
    events = [l for l in out_lines if l.startswith("count=")]
    assert out_lines[-1] == f"predicted={predicted}"
    assert len(events) == predicted
    assert all(" at_sample=" in l for l in events)


def test_eval_loo(workspace, capsys):
    root, cfg, corpus, _ = workspace
    assert main(["eval-loo", "--corpus", str(corpus), "--config", str(cfg), "--holdout", "ex00",
                 "--cache", str(root / "cache"), "--out", str(root / "reports")]) == 0
    assert "macro_f1=" in capsys.readouterr().out
    assert (root / "reports" / "counting.csv").exists()


def test_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["synth", "--out", str(tmp_path / "c"), "--config", str(bad)]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["synth", "--exercises", "1", "--out", str(tmp_path / "c")]) == 2
    assert main(["train"]) == 2


def test_runtime_errors_are_one_line(tmp_path, capsys):
    code = main(["count", str(tmp_path / "missing.csv"), "--checkpoint", str(tmp_path / "x.npz"),
                 "--support", str(tmp_path / "s.npz")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("repkit count: error:")


def test_count_rejects_malformed_file(workspace, tmp_path, capsys):
    root, _, _, ckpt = workspace
    bad = tmp_path / "bad.csv"
    bad.write_text("#rate=92,channels=9,exercise=a,subject=b\n1,2,3,4,5,6,7,8\n")
    assert main(["count", str(bad), "--checkpoint", str(ckpt), "--support", str(root / "reg" / "support.npz")]) == 1
    assert "line 2" in capsys.readouterr().err
