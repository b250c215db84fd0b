import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rhythmlab.cli import run
from rhythmlab.rhythm_metrics import IntervalSequence, compute_metrics, parse_segmentation, read_metrics_csv
from rhythmlab.rnn import init_model, load_checkpoint, save_checkpoint
from rhythmlab.synth import LANGUAGES


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["--seed", "3", "synth", "--out", str(root / "corp"), "--per-language", "4", "--speakers", "2"]) == 0
    assert run(["features", "--manifest", str(root / "corp" / "manifest.jsonl"), "--cache-dir", str(root / "cache")]) == 0
    return root


def train_args(corpus, ckpt, *extra):
    return ["--seed", "7", "train", "--cache-dir", str(corpus / "cache"), "--checkpoint", str(ckpt),
            "--epochs", "1", "--hidden", "4", "--batch-size", "8", "--test-fraction", "0.2", *extra]


class TestMetrics:
    def test_byte_identical_rerun(self, tmp_path, corpus):
        files = sorted(str(p) for p in (corpus / "corp" / "audio").glob("*.cv"))
        assert run(["metrics", *files, "--out", str(tmp_path / "a.csv")]) == 0
        assert run(["metrics", *files, "--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = read_metrics_csv(tmp_path / "a.csv")
        for path, (sid, _, m) in zip(files, rows):
            np.testing.assert_array_equal(m.as_array(), compute_metrics(parse_segmentation(path)).as_array())

    def test_manifest_mode(self, tmp_path, corpus):
        assert run(["metrics", "--manifest", str(corpus / "corp" / "manifest.jsonl"), "--out", str(tmp_path / "m.csv")]) == 0
        rows = read_metrics_csv(tmp_path / "m.csv")
        assert len(rows) == 12 and {r[1] for r in rows} == set(LANGUAGES)

    def test_hand_file(self, tmp_path):
        (tmp_path / "s.cv").write_text("C 0.05\nV 0.10\nC 0.15\nV 0.10\n")
        assert run(["metrics", str(tmp_path / "s.cv"), "--out", str(tmp_path / "o.csv")]) == 0
        m = read_metrics_csv(tmp_path / "o.csv")[0][2]
        ref = compute_metrics(IntervalSequence([("C", 0.05), ("V", 0.10), ("C", 0.15), ("V", 0.10)]))
        np.testing.assert_array_equal(m.as_array(), ref.as_array())

    def test_bad_segmentation(self, tmp_path, capsys):
        (tmp_path / "s.cv").write_text("C -1\n")
        assert run(["metrics", str(tmp_path / "s.cv"), "--out", str(tmp_path / "o.csv")]) != 0
        assert "s.cv:1" in capsys.readouterr().err


class TestTrainEval:
    def test_train_deterministic(self, tmp_path, corpus):
        assert run(train_args(corpus, tmp_path / "a.rlm")) == 0
        assert run(train_args(corpus, tmp_path / "b.rlm")) == 0
        assert (tmp_path / "a.rlm").read_bytes() == (tmp_path / "b.rlm").read_bytes()
        split = json.loads((tmp_path / "a.rlm.split.json").read_text())
        assert split["test_speakers"]

    def test_eval_outputs(self, tmp_path, corpus, capsys):
        ckpt = tmp_path / "m.rlm"
        assert run(train_args(corpus, ckpt, "--log", str(tmp_path / "log.csv"))) == 0
        out = tmp_path / "conf.csv"
        assert run(["eval", "--cache-dir", str(corpus / "cache"), "--checkpoint", str(ckpt),
                    "--split", "all", "--out", str(out), "--normalize"]) == 0
        assert "accuracy" in capsys.readouterr().out
        rows = out.read_text().splitlines()[1:]
        for row in rows:
            assert sum(float(v) for v in row.split(",")[1:]) == pytest.approx(1.0)
        assert len((tmp_path / "log.csv").read_text().splitlines()) == 2

    def test_label_mismatch(self, tmp_path, corpus, capsys):
        save_checkpoint(init_model(labels=["xx", "yy", "zz"], hidden=3), tmp_path / "other.rlm")
        code = run(["eval", "--cache-dir", str(corpus / "cache"), "--checkpoint", str(tmp_path / "other.rlm"), "--split", "all"])
        assert code != 0
        assert "do not match" in capsys.readouterr().err

    def test_config_file_and_flag_precedence(self, tmp_path, corpus):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"hidden": 5, "epochs": 1}))
        base = ["--config", str(cfg), "--seed", "1", "train", "--cache-dir", str(corpus / "cache"), "--batch-size", "8"]
        assert run([*base, "--checkpoint", str(tmp_path / "c.rlm")]) == 0
        assert load_checkpoint(tmp_path / "c.rlm").hidden == 5
        assert run([*base, "--checkpoint", str(tmp_path / "d.rlm"), "--hidden", "3"]) == 0
        assert load_checkpoint(tmp_path / "d.rlm").hidden == 3

    def test_inputs_untouched(self, tmp_path, corpus):
        before = tree_digest(corpus)
        ckpt = tmp_path / "m.rlm"
        cache = str(corpus / "cache")
        assert run(train_args(corpus, ckpt)) == 0
        assert run(["histograms", "--cache-dir", cache, "--checkpoint", str(ckpt), "--out", str(tmp_path / "h.csv")]) == 0
        assert run(["cluster", "--histograms", str(tmp_path / "h.csv"), "--out", str(tmp_path / "d.json"),
                    "--matrix-out", str(tmp_path / "D.csv")]) == 0
        assert run(["mds", "--dissimilarity", str(tmp_path / "D.csv"), "--out", str(tmp_path / "mds.csv")]) == 0
        assert run(["tsne", "--cache-dir", cache, "--checkpoint", str(ckpt), "--perplexity", "2",
                    "--out", str(tmp_path / "ts.csv")]) == 0
        assert tree_digest(corpus) == before
        tree = json.loads((tmp_path / "d.json").read_text())
        assert tree["linkage"] == "complete"
        assert len((tmp_path / "mds.csv").read_text().splitlines()) == 4


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert run(["train", "--bogus"]) == 2
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["eval", "--cache-dir", str(tmp_path), "--checkpoint", str(tmp_path / "none.rlm")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_cache(self, tmp_path, capsys):
        code = run(["train", "--cache-dir", str(tmp_path / "nope"), "--checkpoint", str(tmp_path / "m.rlm")])
        assert code != 0
        assert capsys.readouterr().err.startswith("rhythmlab train: error:")

    def test_missing_manifest(self, tmp_path, capsys):
        assert run(["features", "--manifest", str(tmp_path / "m.jsonl")]) != 0
        assert "m.jsonl" in capsys.readouterr().err

    def test_env_cache(self, tmp_path, corpus, monkeypatch):
        monkeypatch.setenv("RHYTHMLAB_CACHE", str(corpus / "cache"))
        assert run(train_args(corpus, tmp_path / "e.rlm")[:3] + ["--checkpoint", str(tmp_path / "e.rlm"),
                                                                "--epochs", "1", "--hidden", "3"]) == 0

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "rhythmlab", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "synth" in proc.stdout
