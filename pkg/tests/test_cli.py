"""End-to-end CLI: every command, exit codes, byte-level determinism."""

import json

import numpy as np
import pytest

from regmatch.cli import main
from regmatch.vector_io import (
    load_sentence_vectors,
    read_jsonl,
    save_sentence_vectors,
    save_vectors,
)


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    long_rule = "x" * 189 + "." + "y" * 189 + "." + "z" * 70
    docs = [
        {"doc_id": "rule-1", "kind": "rule",
         "text": "Firms must submit an annual report. The report covers capital."},
        {"doc_id": "rule-2", "kind": "rule", "text": long_rule},
        {"doc_id": "pol-1", "kind": "policy",
         "text": "Our team submits the annual report internally."},
    ]
    path.write_text("".join(json.dumps(d) + "\n" for d in docs))
    return path


def ingest(tmp_path, corpus_file, suffix=""):
    sentences = tmp_path / f"sentences{suffix}.jsonl"
    vocab = tmp_path / f"vocab{suffix}.tsv"
    code = run("ingest", corpus_file, "--out-sentences", sentences, "--out-vocab", vocab)
    assert code == 0
    return sentences, vocab


class TestIngest:
    def test_outputs_and_split(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        rows = read_jsonl(sentences)
        long_doc_rows = [r for r in rows if r["doc_id"] == "rule-2"]
        assert len(long_doc_rows) == 3
        assert vocab.read_text().splitlines()[0].startswith("<unk>\t")

    def test_byte_identical_across_runs(self, tmp_path, corpus_file):
        s1, v1 = ingest(tmp_path, corpus_file, "1")
        s2, v2 = ingest(tmp_path, corpus_file, "2")
        assert s1.read_bytes() == s2.read_bytes()
        assert v1.read_bytes() == v2.read_bytes()

    def test_missing_input_exits_two(self, tmp_path):
        assert run("ingest", tmp_path / "nope.jsonl") == 2


class TestEmbed:
    def test_cooc_round_trips_into_match(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        vectors = tmp_path / "vectors.vec"
        assert run("embed", sentences, vocab, "--backend", "cooc",
                   "--dim", 8, "--out", vectors) == 0
        keys, matrix = load_sentence_vectors(vectors)
        assert len(keys) == len(read_jsonl(sentences))
        report = tmp_path / "report.jsonl"
        assert run("match", "--rules", vectors, "--policies", vectors,
                   "--tau", 0.7, "--out", report) == 0

    def test_skipgram_zero_epochs_is_initialization(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        out1 = tmp_path / "sg1.vec"
        out2 = tmp_path / "sg2.vec"
        for out in (out1, out2):
            assert run("embed", sentences, vocab, "--backend", "skipgram",
                       "--dim", 8, "--epochs", 0, "--seed", 3, "--out", out) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_encoder_checkpoint_header(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = tmp_path / "encoder.ckpt"
        assert run("embed", sentences, vocab, "--backend", "encoder",
                   "--dim", 16, "--heads", 2, "--max-seq", 32, "--out", ckpt) == 0
        with open(ckpt, "rb") as fh:
            header = json.loads(fh.readline())
        assert header["d_e"] == 16 and header["h"] == 2 and header["L_max"] == 32
        vec_out = tmp_path / "enc.vec"
        assert run("embed", sentences, vocab, "--backend", "encoder",
                   "--checkpoint", ckpt, "--out", vec_out) == 0
        keys, matrix = load_sentence_vectors(vec_out)
        assert np.allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-5)

    def test_word_vector_export(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        out = tmp_path / "s.vec"
        words = tmp_path / "w.vec"
        assert run("embed", sentences, vocab, "--backend", "cooc", "--dim", 8,
                   "--out", out, "--out-word-vectors", words) == 0
        assert words.read_text().splitlines()[1].startswith("<unk> ")


class TestMatch:
    def test_identical_fixture_self_matches(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        vectors = tmp_path / "v.vec"
        run("embed", sentences, vocab, "--backend", "cooc", "--dim", 8, "--out", vectors)
        report = tmp_path / "report.jsonl"
        assert run("match", "--rules", vectors, "--policies", vectors,
                   "--out", report) == 0
        rows = read_jsonl(report)
        self_scores = [
            r["score"] for r in rows
            if (r["rule_doc"], r["rule_seq"]) == (r["policy_doc"], r["policy_seq"])
        ]
        keys, _ = load_sentence_vectors(vectors)
        assert len(self_scores) == len(keys)
        assert all(abs(s - 1.0) < 1e-5 for s in self_scores)

    def test_high_tau_on_random_vectors_empty(self, tmp_path):
        rng = np.random.default_rng(0)
        rules = tmp_path / "r.vec"
        policies = tmp_path / "p.vec"
        save_sentence_vectors(rules, [("r", i) for i in range(20)],
                              rng.standard_normal((20, 64)))
        save_sentence_vectors(policies, [("p", i) for i in range(30)],
                              rng.standard_normal((30, 64)))
        report = tmp_path / "report.jsonl"
        assert run("match", "--rules", rules, "--policies", policies,
                   "--tau", 0.99, "--out", report) == 0
        assert read_jsonl(report) == []

    def test_row_count_matches_oracle(self, tmp_path):
        rng = np.random.default_rng(5)
        rule_rows = rng.standard_normal((10, 6))
        policy_rows = rng.standard_normal((25, 6))
        rules = tmp_path / "r.vec"
        policies = tmp_path / "p.vec"
        save_sentence_vectors(rules, [("r", i) for i in range(10)], rule_rows)
        save_sentence_vectors(policies, [("p", i) for i in range(25)], policy_rows)
        report = tmp_path / "report.jsonl"
        tau = 0.3
        assert run("match", "--rules", rules, "--policies", policies,
                   "--tau", tau, "--out", report) == 0

        def unit(m):
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        # vectors round-trip through the 6-significant-digit file format
        r_loaded = unit(load_sentence_vectors(rules)[1])
        p_loaded = unit(load_sentence_vectors(policies)[1])
        expected = int(np.sum(r_loaded @ p_loaded.T >= tau))
        assert len(read_jsonl(report)) == expected


class TestPseudoLabel:
    def test_mock_ensemble_matches_oracle(self, tmp_path, corpus_file, capsys):
        sentences, vocab = ingest(tmp_path, corpus_file)
        pairs = tmp_path / "pairs.jsonl"
        assert run("pseudo-label", "--rules", sentences, "--policies", sentences,
                   "--models", "mock:10", "--dim", 16, "--tau", 0.7,
                   "--out", pairs) == 0
        out = capsys.readouterr().out
        assert "vote cut 4" in out  # > sqrt(10)

        from regmatch import corpus as corpus_mod
        from regmatch.evaluation import HashProjectionModel, ensemble_pseudo_label

        records = corpus_mod.read_sentences(sentences)
        entries = [(r.key, r.text) for r in records]
        models = [HashProjectionModel(f"mock-{i}", dim=16) for i in range(10)]
        expected = ensemble_pseudo_label(models, entries, entries, tau=0.7)
        got = read_jsonl(pairs)
        assert [(p.rule_text, p.policy_text, p.votes) for p in expected] == [
            (r["rule_text"], r["policy_text"], r["votes"]) for r in got
        ]

    def test_zero_models_exits_two(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        assert run("pseudo-label", "--rules", sentences, "--policies", sentences,
                   "--models", "mock:0", "--out", tmp_path / "x.jsonl") == 2


def make_checkpoint(tmp_path, sentences, vocab, name="base.ckpt"):
    ckpt = tmp_path / name
    assert run("embed", sentences, vocab, "--backend", "encoder",
               "--dim", 8, "--heads", 2, "--max-seq", 32,
               "--seed", 1, "--out", ckpt) == 0
    return ckpt


class TestFinetune:
    def test_mlm(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        out = tmp_path / "mlm.ckpt"
        assert run("finetune", "--method", "mlm", "--sentences", sentences,
                   "--vocab", vocab, "--checkpoint", ckpt, "--out", out,
                   "--epochs", 2, "--seed", 0) == 0
        loss_rows = read_jsonl(f"{out}.losses.jsonl")
        assert len(loss_rows) == 2
        assert loss_rows[0]["epoch"] == 0

    def test_mnr(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(
            json.dumps({"rule_text": "annual report capital", "policy_text": "annual report team"}) + "\n"
            + json.dumps({"rule_text": "firms must submit", "policy_text": "team submits internally"}) + "\n"
            + json.dumps({"rule_text": "report covers capital", "policy_text": "our internal report"}) + "\n"
        )
        out = tmp_path / "mnr.ckpt"
        assert run("finetune", "--method", "mnr", "--pairs", pairs,
                   "--vocab", vocab, "--checkpoint", ckpt, "--out", out,
                   "--epochs", 3, "--batch-k", 3, "--seed", 0) == 0
        assert len(read_jsonl(f"{out}.losses.jsonl")) == 3

    def test_gpl_dumps_triplets(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        out = tmp_path / "gpl.ckpt"
        triplets = tmp_path / "triplets.jsonl"
        assert run("finetune", "--method", "gpl", "--sentences", sentences,
                   "--vocab", vocab, "--checkpoint", ckpt, "--out", out,
                   "--epochs", 2, "--n-queries", 2, "--m-negatives", 2,
                   "--dump-triplets", triplets, "--seed", 0) == 0
        rows = read_jsonl(triplets)
        n_paragraphs = len(read_jsonl(sentences))
        assert len(rows) == n_paragraphs * 2 * 2
        assert set(rows[0]) == {"query", "positive", "negative", "margin"}

    def test_zero_epochs_checkpoint_identical(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        out = tmp_path / "same.ckpt"
        assert run("finetune", "--method", "mlm", "--sentences", sentences,
                   "--vocab", vocab, "--checkpoint", ckpt, "--out", out,
                   "--epochs", 0) == 0
        assert out.read_bytes() == ckpt.read_bytes()

    def test_config_file_with_flag_override(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs=5\nlr=0.01\n")
        out = tmp_path / "cfg.ckpt"
        assert run("finetune", "--method", "mlm", "--sentences", sentences,
                   "--vocab", vocab, "--checkpoint", ckpt, "--out", out,
                   "--config", cfg, "--epochs", 1) == 0
        assert len(read_jsonl(f"{out}.losses.jsonl")) == 1  # flag wins

    def test_missing_method_input_exits_two(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        assert run("finetune", "--method", "mnr", "--vocab", vocab,
                   "--checkpoint", ckpt, "--out", tmp_path / "x.ckpt") == 2


class TestEvaluate:
    def orthogonal_fixture(self, tmp_path, n=6):
        pairs = tmp_path / "val.jsonl"
        pairs.write_text(
            "".join(
                json.dumps({"rule_text": f"kw{i}", "policy_text": f"kw{i}", "votes": 5}) + "\n"
                for i in range(n)
            )
        )
        vectors = tmp_path / "oracle.vec"
        save_vectors(vectors, [f"kw{i}" for i in range(n)], np.eye(n))
        return pairs, vectors

    def test_orthogonal_oracle_scores(self, tmp_path):
        pairs, vectors = self.orthogonal_fixture(tmp_path)
        out = tmp_path / "report.json"
        assert run("evaluate", "--pairs", pairs, "--vectors", vectors,
                   "--out", out) == 0
        report = json.loads(out.read_text())
        assert report["score1"] == 1.0 and report["score2"] == 1.0

    def test_baseline_improvement(self, tmp_path):
        pairs, vectors = self.orthogonal_fixture(tmp_path)
        base = tmp_path / "base.json"
        base.write_text(json.dumps(
            {"model": "b", "score1": 0.5, "score2": 0.8, "n": 6,
             "baseline": None, "improvement": None}
        ))
        out = tmp_path / "report.json"
        assert run("evaluate", "--pairs", pairs, "--vectors", vectors,
                   "--baseline", base, "--out", out) == 0
        report = json.loads(out.read_text())
        assert report["improvement"]["score1"] == pytest.approx(1.0)
        assert report["improvement"]["score2"] == pytest.approx(0.25)

    def test_checkpoint_model(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        ckpt = make_checkpoint(tmp_path, sentences, vocab)
        pairs = tmp_path / "val.jsonl"
        pairs.write_text(
            json.dumps({"rule_text": "annual report", "policy_text": "annual report team"}) + "\n"
            + json.dumps({"rule_text": "capital", "policy_text": "capital firms"}) + "\n"
        )
        out = tmp_path / "report.json"
        assert run("evaluate", "--pairs", pairs, "--checkpoint", ckpt,
                   "--vocab", vocab, "--out", out) == 0

    def test_empty_validation_exits_two(self, tmp_path):
        pairs = tmp_path / "val.jsonl"
        pairs.write_text("")
        _, vectors = self.orthogonal_fixture(tmp_path)
        assert run("evaluate", "--pairs", pairs, "--vectors", vectors,
                   "--out", tmp_path / "r.json") == 2


class TestDeterminism:
    def test_manifest_written(self, tmp_path, corpus_file):
        sentences, vocab = ingest(tmp_path, corpus_file)
        manifest = json.loads((tmp_path / "sentences.jsonl.manifest.json").read_text())
        assert manifest["command"] == "ingest"
        assert manifest["inputs"]
        assert "seed" not in manifest["config"] or manifest["config"]["seed"] is not None

    def test_every_command_byte_identical(self, tmp_path, corpus_file):
        outputs = {}
        for tag in ("a", "b"):
            base = tmp_path / tag
            base.mkdir()
            sentences, vocab = ingest(base, corpus_file)
            vectors = base / "v.vec"
            run("embed", sentences, vocab, "--backend", "skipgram", "--dim", 8,
                "--epochs", 2, "--seed", 7, "--out", vectors)
            report = base / "match.jsonl"
            run("match", "--rules", vectors, "--policies", vectors, "--out", report)
            pair_file = base / "pairs.jsonl"
            run("pseudo-label", "--rules", sentences, "--policies", sentences,
                "--models", "mock:4", "--dim", 8, "--tau", 0.5, "--out", pair_file)
            ckpt = make_checkpoint(base, sentences, vocab)
            tuned = base / "tuned.ckpt"
            run("finetune", "--method", "gpl", "--sentences", sentences,
                "--vocab", vocab, "--checkpoint", ckpt, "--out", tuned,
                "--epochs", 1, "--n-queries", 2, "--m-negatives", 2, "--seed", 3)
            score = base / "score.json"
            run("evaluate", "--pairs", pair_file, "--checkpoint", tuned,
                "--vocab", vocab, "--out", score)
            outputs[tag] = [
                p.read_bytes()
                for p in (sentences, vocab, vectors, report, pair_file, ckpt, tuned, score)
            ]
        assert outputs["a"] == outputs["b"]

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["embed", "--help"])
        assert excinfo.value.code == 0
        text = capsys.readouterr().out
        assert "default: 10" in text  # window default visible
        assert "default: 0" in text   # seed default visible
