import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from codelm import cli
from codelm.corpus import Token, TokenKind, TokenSequence, load_corpus, partition_corpus, write_corpus
from codelm.model import init_parameters, load_model, save_model
from codelm.numerics import SeededRng
from codelm.synthetic import cyclic_partition
from codelm.training import TrainingConfig, train

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def fields(text):
    return dict(line.split("\t", 1) for line in text.splitlines() if "\t" in line)


def preprocess(capsys, tree, out, seed=0):
    return run(capsys, "preprocess", tree, "--out", out, "--vocab-size", 40, "--sent-len", 20,
               "--per-split", 30, "--seed", seed)


class TestPreprocess:
    def test_listing_golden_stream(self, capsys, tmp_path):
        src = tmp_path / "one"
        src.mkdir()
        (src / "Listing.java").write_text((DATA / "listing1.java").read_text())
        code, out, _ = run(capsys, "preprocess", src, "--tokens-only")
        assert code == 0
        assert out == (DATA / "listing1.tokens").read_text()

    def test_single_file_cannot_fill_three_splits(self, capsys, tmp_path):
        src = tmp_path / "one"
        src.mkdir()
        (src / "Listing.java").write_text((DATA / "listing1.java").read_text())
        code, out, err = run(capsys, "preprocess", src, "--out", tmp_path / "c", "--sent-len", 5,
                             "--per-split", 1, "--min-count", 1)
        assert code == 2 and "only" in err

    def test_tree(self, capsys, tmp_path, java_tree):
        code, out, err = preprocess(capsys, java_tree, tmp_path / "c")
        assert code == 0, err
        f = fields(out)
        assert int(f["tokens"]) > 3000 and int(f["files"]) == 24
        assert int(f["unique_tokens"]) < int(f["tokens"])
        for name in ("train.txt", "valid.txt", "test.txt", "vocab.tsv", "manifest.json"):
            assert (tmp_path / "c" / name).exists()
        part = load_corpus(tmp_path / "c")
        assert part.train.shape == (30, 20) and len(part.vocab) <= 40

    def test_rerun_identical(self, capsys, tmp_path, java_tree):
        preprocess(capsys, java_tree, tmp_path / "a")
        preprocess(capsys, java_tree, tmp_path / "b")
        for name in ("train.txt", "valid.txt", "test.txt", "vocab.tsv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_tree(self, capsys, tmp_path):
        (tmp_path / "empty").mkdir()
        code, out, err = run(capsys, "preprocess", tmp_path / "empty", "--out", tmp_path / "c")
        assert code != 0 and "no tokens" in err and out == ""

    def test_skips_unlexable_file(self, capsys, tmp_path, java_tree):
        (java_tree / "Broken.java").write_text('String s = "never closed;\n')
        code, _, err = preprocess(capsys, java_tree, tmp_path / "c")
        assert code == 0
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert manifest["skipped_files"] == ["Broken.java"]


@pytest.fixture
def corpus_dir(capsys, tmp_path, java_tree):
    out = tmp_path / "corpus"
    assert preprocess(capsys, java_tree, out)[0] == 0
    return out


def train_args(corpus, out, kind, *extra):
    return ("train", corpus, "--kind", kind, "--out", out, "--embed-dim", 6, "--max-epochs", 2,
            "--batch-size", 8, "--dropout", 0.0, *extra)


class TestTrain:
    @pytest.mark.parametrize("kind,eta,rho,eps", [("lstm", 0.02, 0.99, 1e-7), ("rnn", 0.01, 0.9, 1e-8)])
    def test_default_hyperparameters_echoed(self, capsys, tmp_path, corpus_dir, kind, eta, rho, eps):
        code, out, err = run(capsys, *train_args(corpus_dir, tmp_path / "m", kind))
        assert code == 0, err
        head = [l[2:] for l in (tmp_path / "m" / "train_log.tsv").read_text().splitlines() if l.startswith("# ")]
        echo = dict(l.split("=", 1) for l in head if "=" in l)
        assert float(echo["learning_rate"]) == eta
        assert float(echo["adaptation_rate"]) == rho
        assert float(echo["smoothing"]) == eps
        assert echo["objective"] == "softmax" and echo["kind"] == kind
        assert "learning_rate=" in err
        rows = [l for l in (tmp_path / "m" / "train_log.tsv").read_text().splitlines() if not l.startswith("#")]
        assert [r.split("\t")[0] for r in rows] == ["1", "2"]
        params, _, opt = load_model(tmp_path / "m" / "model.bin")
        assert params.kind == kind and opt is not None

    def test_nce_objective(self, capsys, tmp_path, corpus_dir):
        code, _, err = run(capsys, *train_args(corpus_dir, tmp_path / "m", "rnn", "--nce-k", 100))
        assert code == 0, err
        log = (tmp_path / "m" / "train_log.tsv").read_text()
        assert "# objective=nce" in log and "# nce_k=100" in log

    def test_invalid_override(self, capsys, tmp_path, corpus_dir):
        code, _, err = run(capsys, *train_args(corpus_dir, tmp_path / "m", "rnn", "--dropout", 1.5))
        assert code == 2 and "dropout" in err

    def test_corrupt_corpus(self, capsys, tmp_path, corpus_dir):
        vocab = corpus_dir / "vocab.tsv"
        vocab.write_text(vocab.read_text().replace("\t", "\tx", 1))
        code, _, err = run(capsys, *train_args(corpus_dir, tmp_path / "m", "rnn"))
        assert code == 2 and "cannot load corpus" in err


def uniform_corpus(root, N=1000):
    """Corpus whose vocabulary has exactly ``N`` entries, plus a matching U = 0 model."""
    words = [f"t{i}" for i in range(N - 3)]
    docs = [TokenSequence([Token(w, TokenKind.IDENTIFIER) for w in words[d::6] * 2], f"d{d}") for d in range(6)]
    part = partition_corpus(docs, per_split=2, seed=0, sent_len=50, vocab_size=N, min_count=1)
    # every document lands in some split, so train-only vocabulary may be smaller than N
    write_corpus(part, root)
    m = init_parameters("lstm", len(part.vocab), 4, rng=SeededRng(0))
    m.U[:] = 0
    save_model(root / "uniform.bin", m, part.vocab.hash())
    return part


class TestEval:
    def test_uniform_model(self, capsys, tmp_path):
        part = uniform_corpus(tmp_path / "c")
        code, out, err = run(capsys, "eval", tmp_path / "c" / "uniform.bin", tmp_path / "c")
        assert code == 0, err
        f = fields(out)
        assert float(f["perplexity"]) == pytest.approx(len(part.vocab), abs=1e-6)
        assert int(f["tokens"]) == part.test.size
        assert f["N"] == str(len(part.vocab))

    def test_trained_beats_untrained(self, capsys, tmp_path, corpus_dir):
        run(capsys, *train_args(corpus_dir, tmp_path / "m", "rnn"))
        _, out, _ = run(capsys, "eval", tmp_path / "m" / "model.bin", corpus_dir)
        part = load_corpus(corpus_dir)
        fresh = init_parameters("rnn", len(part.vocab), 6, rng=SeededRng(0))
        save_model(tmp_path / "fresh.bin", fresh, part.vocab.hash())
        _, out0, _ = run(capsys, "eval", tmp_path / "fresh.bin", corpus_dir)
        assert float(fields(out)["perplexity"]) < float(fields(out0)["perplexity"])

    def test_missing_model(self, capsys, tmp_path, corpus_dir):
        code, out, err = run(capsys, "eval", tmp_path / "nope.bin", corpus_dir)
        assert code != 0 and "no such model" in err and out == ""

    def test_vocabulary_mismatch(self, capsys, tmp_path, corpus_dir):
        part = load_corpus(corpus_dir)
        m = init_parameters("rnn", len(part.vocab), 4, rng=SeededRng(0))
        save_model(tmp_path / "other.bin", m, b"\0" * 32)
        code, _, err = run(capsys, "eval", tmp_path / "other.bin", corpus_dir)
        assert code == 2 and "vocabulary" in err


def save_with_vocab(dirpath, m, vocab):
    dirpath.mkdir(parents=True, exist_ok=True)
    save_model(dirpath / "model.bin", m, vocab.hash())
    (dirpath / "vocab.tsv").write_text(vocab.to_tsv())
    return dirpath / "model.bin"


def parse_suggestions(out):
    return [(int(r), t, float(p)) for r, t, p in (l.split("\t") for l in out.splitlines())]


class TestSuggest:
    def test_full_distribution_sums_to_one(self, capsys, tmp_path):
        part = cyclic_partition(per_split=4, sent_len=10)
        m = init_parameters("lstm", len(part.vocab), 5, rng=SeededRng(3))
        model = save_with_vocab(tmp_path / "m", m, part.vocab)
        code, out, _ = run(capsys, "suggest", model, "--tokens", "a b c", "--top-k", len(part.vocab))
        assert code == 0
        rows = parse_suggestions(out)
        assert len(rows) == len(part.vocab)
        assert abs(sum(p for _, _, p in rows) - 1) <= 1e-9
        probs = [p for _, _, p in rows]
        assert probs == sorted(probs, reverse=True)

    def test_uniform_model_ties_by_id(self, capsys, tmp_path):
        part = cyclic_partition(per_split=4, sent_len=10)
        m = init_parameters("rnn", len(part.vocab), 5, rng=SeededRng(3))
        m.U[:] = 0
        model = save_with_vocab(tmp_path / "m", m, part.vocab)
        _, out, _ = run(capsys, "suggest", model, "--tokens", "q", "--top-k", 5)
        rows = parse_suggestions(out)
        N = len(part.vocab)
        assert all(p == pytest.approx(1 / N, rel=1e-10) for _, _, p in rows)
        assert [t for _, t, _ in rows] == part.vocab.tokens[:5]

    @pytest.mark.parametrize("kind", ["rnn", "lstm"])
    def test_trained_cyclic_ranks_successor_first(self, capsys, tmp_path, kind):
        part = cyclic_partition(per_split=100, sent_len=20)
        cfg = TrainingConfig.for_kind(kind, embed_dim=16, dropout_rate=0.0, max_epochs=8, batch_size=16)
        res = train(part, cfg, kind)
        model = save_with_vocab(tmp_path / "m", res.params, part.vocab)
        for ctx, nxt in [("a b c", "d"), ("w x y z", "a"), ("m", "n")]:
            _, out, _ = run(capsys, "suggest", model, "--tokens", ctx, "--top-k", 3)
            assert parse_suggestions(out)[0][1] == nxt

    def test_source_context_is_lexed(self, capsys, tmp_path):
        part = cyclic_partition(per_split=4, sent_len=10)
        m = init_parameters("rnn", len(part.vocab), 5, rng=SeededRng(0))
        model = save_with_vocab(tmp_path / "m", m, part.vocab)
        code, out, _ = run(capsys, "suggest", model, "--context", "a /* skip */ b // c")
        assert code == 0 and len(parse_suggestions(out)) == 10

    def test_all_unknown_warns(self, capsys, caplog, tmp_path):
        part = cyclic_partition(per_split=4, sent_len=10)
        m = init_parameters("rnn", len(part.vocab), 5, rng=SeededRng(0))
        model = save_with_vocab(tmp_path / "m", m, part.vocab)
        code, out, err = run(capsys, "suggest", model, "--tokens", "XYZ QQ")
        assert code == 0 and out
        assert "out of vocabulary" in caplog.text

    def test_empty_context(self, capsys, tmp_path):
        part = cyclic_partition(per_split=4, sent_len=10)
        model = save_with_vocab(tmp_path / "m", init_parameters("rnn", len(part.vocab), 5), part.vocab)
        code, _, err = run(capsys, "suggest", model, "--context", "// only a comment")
        assert code == 2 and "empty" in err


def test_grid_command(capsys, tmp_path, java_tree):
    code, out, err = run(capsys, "grid", java_tree, "--out", tmp_path / "g", "--sent-lens", "10",
                         "--embed-dims", "4", "--vocab-size", 30, "--per-split", 20, "--max-epochs", 1,
                         "--dropout", 0.0)
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0].split("\t") == ["sent-len", "embed-dim", "RNN", "LSTM", "improv %"]
    assert lines[1].startswith("10\t4\t")
    assert (tmp_path / "g" / "grid.md").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "codelm.cli", "eval", str(tmp_path / "x.bin"), str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode != 0 and proc.stdout == "" and "error" in proc.stderr
