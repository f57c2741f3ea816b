import json
import os

import pytest

from s2s.cli import main
from test_sweep import TINY


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_bleu_same_file(tmp_path, capsys):
    f = write(tmp_path / "h.txt", "a b c d e\nthe cat sat on the mat\n")
    assert main(["bleu", "--hyp", f, "--ref", f]) == 0
    assert capsys.readouterr().out.startswith("BLEU = 100.00, ")


def test_bleu_line_mismatch_is_runtime_error(tmp_path, capsys):
    a = write(tmp_path / "a.txt", "x\ny\n")
    b = write(tmp_path / "b.txt", "x\n")
    assert main(["bleu", "--hyp", a, "--ref", b]) == 2
    assert "mismatch" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["translate"]) == 1
    assert main(["bleu", "--hyp", "x"]) == 1
    assert main(["decode", "--bem", "3", "--checkpoint", "c", "--input", "i"]) == 1
    assert "did you mean --beam" in capsys.readouterr().err
    assert main(["sweep", "--config", "c", "--out", "o", "--jobs", "0"]) == 1
    assert main(["--help"]) == 0


def test_config_error_exit(tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", "unitz: 4\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "did you mean 'units'" in capsys.readouterr().err


def test_bpe_commands(tmp_path):
    corpus = write(tmp_path / "train.txt", "low lower lowest\nslow newer newest\nwidest wider\n" * 3)
    assert main(["bpe-learn", "--input", corpus, "--merges", "12", "--out", str(tmp_path / "bpe")]) == 0
    assert (tmp_path / "bpe" / "vocab.txt").exists()
    assert main(["bpe-apply", "--merges", str(tmp_path / "bpe" / "merges.txt"), "--input", corpus,
                 "--out", str(tmp_path / "seg")]) == 0
    seg = (tmp_path / "seg" / "train.txt.bpe").read_text().splitlines()
    joined = [line.replace("@@ ", "") for line in seg]
    assert joined == (tmp_path / "train.txt").read_text().splitlines()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = write(tmp / "exp.cfg", TINY.replace("train.max_steps: 12", "train.max_steps: 30"))
    assert main(["train", "--config", cfg, "--out", str(tmp / "run"), "--seed", "3",
                 "--set", "attention.type=add"]) == 0
    return tmp


def test_train_outputs(trained):
    run = trained / "run"
    best = json.loads((run / "best.json").read_text())
    assert os.path.exists(run / best["best_checkpoint"])
    assert (run / "train_log.csv").read_text().startswith("step,train_loss,val_loss,val_ppl,val_bleu\n")
    assert sorted(os.listdir(run / "checkpoints")) == [f"step_{s:08d}.ckpt" for s in (6, 12, 18, 24, 30)]


def test_decode_beam_one_equals_greedy(trained):
    src = write(trained / "src.txt", "w1 w2 w3\nw5 w0\nw7 w7 w7 w1\n")
    ckpt = str(trained / "run" / "checkpoints" / "step_00000030.ckpt")
    outs = {}
    for name, flags in (("beam1", ["--beam", "1"]), ("greedy", ["--greedy"]), ("beam4", ["--beam", "4", "--nbest"])):
        assert main(["decode", "--checkpoint", ckpt, "--input", src, "--out", str(trained / name), *flags]) == 0
        outs[name] = (trained / name / "hypotheses.txt").read_bytes()
    assert outs["beam1"] == outs["greedy"]
    assert len(outs["beam4"].splitlines()) == 3
    nbest = (trained / "beam4" / "nbest.txt").read_text().splitlines()
    assert nbest and all(len(line.split(" ||| ")) == 4 for line in nbest)


def test_decode_missing_checkpoint(tmp_path):
    src = write(tmp_path / "s.txt", "w1\n")
    assert main(["decode", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", src]) == 2


def test_sweep_and_report(tmp_path, capsys):
    cfg = write(tmp_path / "exp.cfg", TINY)
    out = tmp_path / "exp"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--jobs", "2"]) == 0
    md = (out / "report.md").read_text()
    rows = [ln for ln in md.splitlines() if ln.startswith("| attention.type=")]
    assert len(rows) == 2
    before = (out / "results.csv").read_bytes()
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out == md
    assert (out / "results.csv").read_bytes() == before
    assert sorted(os.listdir(tmp_path)) == ["exp", "exp.cfg"]
