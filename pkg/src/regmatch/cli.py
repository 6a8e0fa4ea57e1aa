"""Command-line surface for the rule-to-policy matching workflows.

One binary, subcommand style::

    regmatch ingest corpus.jsonl --out-sentences s.jsonl --out-vocab v.tsv
    regmatch embed s.jsonl v.tsv --backend cooc --out vectors.vec
    regmatch match --rules r.vec --policies p.vec --out report.jsonl
    regmatch pseudo-label --rules r.jsonl --policies p.jsonl --models mock:10 ...
    regmatch finetune --method gpl --sentences s.jsonl --vocab v.tsv ...
    regmatch evaluate --pairs val.jsonl --checkpoint ck --vocab v.tsv ...

Every run writes a ``<output>.manifest.json`` sidecar (input hashes, config,
seed); primary outputs are byte-identical across runs for fixed seeds and
inputs.  Exit codes: 0 success, 2 usage/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import adapt, attention, corpus, count_embed, evaluation, neural_embed, search
from .errors import NumericalError, RegmatchError
from .vector_io import (
    load_sentence_vectors,
    read_jsonl,
    save_sentence_vectors,
    save_vectors,
    write_jsonl,
)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(primary_out: Path, args: argparse.Namespace, inputs: list[Path]) -> None:
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and p.exists()},
        "created_unix": time.time(),
    }
    with open(f"{primary_out}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_vocab(path: Path) -> corpus.Vocabulary:
    return corpus.Vocabulary.load(path)


def _encoded_records(sentences_path: Path, vocab: corpus.Vocabulary):
    records = corpus.read_sentences(sentences_path)
    return corpus.encode_sentences(records, vocab)


def _mean_of_word_vectors(records, table: count_embed.DenseEmbeddingTable):
    keys, rows, skipped = [], [], []
    for record in records:
        vector = np.mean([table.vectors[i] for i in record.tokens], axis=0)
        if np.linalg.norm(vector) == 0.0:
            skipped.append(record.key)  # token(s) with no co-occurrence signal
            continue
        keys.append(record.key)
        rows.append(vector)
    if skipped:
        warnings.warn(f"skipped {len(skipped)} sentence(s) with zero vectors: "
                      f"{skipped[:5]}")
    return keys, np.vstack(rows) if rows else np.zeros((0, table.dim))


def _encoder_sentence_vectors(records, params: attention.EncoderParams):
    keys, rows = [], []
    limit = params.config.L_max
    for record in records:
        keys.append(record.key)
        rows.append(attention.forward(params, record.tokens[:limit]).sentence)
    return keys, np.vstack(rows) if rows else np.zeros((0, params.config.d_e))


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    docs = corpus.read_documents(args.corpus)
    records = []
    for doc in docs:
        cleaned = corpus.Document(doc.doc_id, doc.kind, corpus.clean_text(doc.raw_text))
        records.extend(corpus.split_sentences(cleaned, args.max_len))
    corpus.write_sentences(args.out_sentences, records)
    vocab = corpus.build_vocabulary(records, args.min_count)
    vocab.save(args.out_vocab)
    _write_manifest(args.out_sentences, args, [args.corpus])
    print(f"ingested {len(docs)} documents -> {len(records)} sentences, "
          f"vocabulary of {len(vocab)} tokens")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    vocab = _load_vocab(args.vocab)
    records = _encoded_records(args.sentences, vocab)

    if args.backend == "cooc":
        config = count_embed.CountEmbeddingConfig(
            window_size=args.window,
            svd_rank=min(args.dim, len(vocab)),
            seed=args.seed,
        )
        table = count_embed.build_count_embeddings(records, vocab, config)
        keys, rows = _mean_of_word_vectors(records, table)
        save_sentence_vectors(args.out, keys, rows)
        if args.out_word_vectors:
            save_vectors(args.out_word_vectors, vocab.id_to_token, table.vectors)
    elif args.backend == "skipgram":
        sgd = neural_embed.SgdConfig(
            dim=args.dim,
            learning_rate=args.lr if args.lr is not None else 0.05,
            epochs=args.epochs,
            k_negatives=args.k_negatives,
            window=min(args.window, 5),
            seed=args.seed,
        )
        model, losses = neural_embed.train(records, vocab, sgd)
        write_jsonl(
            f"{args.out}.losses.jsonl",
            [{"epoch": e, "mean_loss": loss} for e, loss in enumerate(losses)],
        )
        table = model.embedding_table()
        keys, rows = _mean_of_word_vectors(records, table)
        save_sentence_vectors(args.out, keys, rows)
        if args.out_word_vectors:
            save_vectors(args.out_word_vectors, vocab.id_to_token, table.vectors)
    else:  # encoder
        if args.checkpoint:
            params = attention.load_checkpoint(args.checkpoint)
            keys, rows = _encoder_sentence_vectors(records, params)
            save_sentence_vectors(args.out, keys, rows)
        else:
            config = attention.AttentionConfig(
                d_e=args.dim, h=args.heads, L_max=args.max_seq
            )
            params = attention.initialize_params(len(vocab), config, seed=args.seed)
            attention.save_checkpoint(args.out, params)
    _write_manifest(args.out, args, [args.sentences, args.vocab])
    print(f"embed backend={args.backend} -> {args.out}")
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    policy_keys, policy_rows = load_sentence_vectors(args.policies)
    rule_keys, rule_rows = load_sentence_vectors(args.rules)
    index = search.build_index(list(zip(policy_keys, policy_rows)))
    matches = search.threshold_match(
        index, list(zip(rule_keys, rule_rows)), tau=args.tau
    )
    write_jsonl(args.out, search.match_report_rows(matches))
    if args.rules_text and args.policies_text:
        rule_texts = {r.key: r.text for r in corpus.read_sentences(args.rules_text)}
        policy_texts = {r.key: r.text for r in corpus.read_sentences(args.policies_text)}
        print(search.format_match_table(matches, rule_texts, policy_texts))
    _write_manifest(args.out, args, [args.rules, args.policies])
    print(f"{len(matches)} matches at tau={args.tau} -> {args.out}")
    return 0


def _build_models(spec: str, dim: int) -> list:
    models = []
    for entry in spec.split(","):
        entry = entry.strip()
        if not entry:
            continue
        if entry.startswith("mock:"):
            count = int(entry.split(":", 1)[1])
            models.extend(
                evaluation.HashProjectionModel(f"mock-{i}", dim=dim) for i in range(count)
            )
        elif entry.startswith("file:"):
            models.append(evaluation.WordVectorModel.from_file(entry.split(":", 1)[1]))
        else:
            raise ValueError(f"unknown model spec entry: {entry!r}")
    if not models:
        raise ValueError("model spec produced no models")
    return models


def cmd_pseudo_label(args: argparse.Namespace) -> int:
    models = _build_models(args.models, args.dim)
    rules = [(r.key, r.text) for r in corpus.read_sentences(args.rules)]
    policies = [(r.key, r.text) for r in corpus.read_sentences(args.policies)]
    vote_cut = None if args.vote_cut == "auto" else int(args.vote_cut)
    pairs = evaluation.ensemble_pseudo_label(
        models, rules, policies, tau=args.tau, vote_cut=vote_cut
    )
    evaluation.write_validation_pairs(args.out, pairs)
    _write_manifest(args.out, args, [args.rules, args.policies])
    effective = vote_cut if vote_cut is not None else evaluation.default_vote_cut(len(models))
    print(f"{len(pairs)} pairs retained (N={len(models)}, tau={args.tau}, "
          f"vote cut {effective}) -> {args.out}")
    return 0


def _train_config(args: argparse.Namespace) -> adapt.TrainConfig:
    config = (
        adapt.TrainConfig.from_file(args.config) if args.config else adapt.TrainConfig()
    )
    overrides = {
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_k": args.batch_k,
        "m_negatives": args.m_negatives,
        "n_queries": args.n_queries,
        "temperature": args.temperature,
        "seed": args.seed,
    }
    for attr, value in overrides.items():
        if value is not None:
            setattr(config, attr, value)
    return config


def cmd_finetune(args: argparse.Namespace) -> int:
    vocab = _load_vocab(args.vocab)
    params = attention.load_checkpoint(args.checkpoint)
    config = _train_config(args)

    if args.method in ("mlm", "gpl") and not args.sentences:
        raise ValueError(f"--method {args.method} requires --sentences")
    if args.method == "mnr" and not args.pairs:
        raise ValueError("--method mnr requires --pairs")

    if args.method == "mlm":
        records = _encoded_records(args.sentences, vocab)
        batches = [
            corpus.mask_tokens(r.tokens, args.mask_fraction, seed=config.seed + i)
            for i, r in enumerate(records)
        ]
        trained, losses = adapt.mlm_pretrain(params, batches, config)
    elif args.method == "mnr":
        rows = read_jsonl(args.pairs)
        pairs = adapt.encode_text_pairs(
            [(row["rule_text"], row["policy_text"]) for row in rows], vocab
        )
        trained, losses = adapt.fine_tune_mnr(params, pairs, config)
    else:  # gpl
        records = corpus.read_sentences(args.sentences)
        paragraphs = [r.text for r in records]
        generator = adapt.TfidfQueryGenerator(paragraphs, seed=config.seed)
        teacher = attention.initialize_params(
            len(vocab), params.config, seed=args.scorer_seed
        )
        scorer = adapt.EncoderCrossScorer(teacher, vocab)
        result = adapt.gpl_pipeline(paragraphs, generator, scorer, params, vocab, config)
        trained, losses = result.params, result.epoch_losses
        if args.dump_triplets:
            write_jsonl(args.dump_triplets, adapt.triplet_rows(result.triplets))
        print(f"generated {len(result.triplets)} pseudo-labeled triplets")

    attention.save_checkpoint(args.out, trained)
    write_jsonl(
        args.loss_log or f"{args.out}.losses.jsonl",
        [{"epoch": e, "mean_loss": loss} for e, loss in enumerate(losses)],
    )
    _write_manifest(args.out, args, [p for p in (args.sentences, args.pairs, args.vocab,
                                                 args.checkpoint) if p])
    print(f"finetune method={args.method} epochs={config.epochs} -> {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    pairs = evaluation.read_validation_pairs(args.pairs)
    if args.vectors:
        model = evaluation.WordVectorModel.from_file(args.vectors)
    else:
        if not args.checkpoint or not args.vocab:
            raise ValueError("evaluate needs --vectors or (--checkpoint and --vocab)")
        vocab = _load_vocab(args.vocab)
        params = attention.load_checkpoint(args.checkpoint)
        model = _TruncatingEncoderModel(str(args.checkpoint), params, vocab)
    baseline = None
    if args.baseline:
        baseline = evaluation.ScoreReport.from_json(
            json.loads(Path(args.baseline).read_text())
        )
    report = evaluation.evaluate_model(model, pairs, seed=args.seed, baseline=baseline)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True)
        fh.write("\n")
    print(evaluation.format_score_table(report))
    _write_manifest(args.out, args, [args.pairs])
    return 0


class _TruncatingEncoderModel(evaluation.EncoderModel):
    """EncoderModel that truncates texts to the encoder context length."""

    def encode(self, text: str) -> np.ndarray:
        ids = self.vocab.encode(corpus.tokenize(text))
        if not ids:
            raise ValueError(f"cannot encode token-less text: {text!r}")
        limit = self.params.config.L_max
        return attention.forward(self.params, ids[:limit]).sentence


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regmatch",
        description="Semantic matching of regulatory rules to policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("ingest", formatter_class=fmt,
                       help="clean, split, and tokenize a document corpus")
    p.add_argument("corpus", type=Path, help="JSON-lines documents "
                   '{"doc_id", "kind", "text"}')
    p.add_argument("--max-len", type=int, default=200, help="max sentence length (chars)")
    p.add_argument("--min-count", type=int, default=1, help="vocabulary frequency floor")
    p.add_argument("--out-sentences", type=Path, default=Path("sentences.jsonl"))
    p.add_argument("--out-vocab", type=Path, default=Path("vocab.tsv"))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("embed", formatter_class=fmt,
                       help="embed sentences (count, skip-gram, or encoder backend)")
    p.add_argument("sentences", type=Path)
    p.add_argument("vocab", type=Path)
    p.add_argument("--backend", choices=("cooc", "skipgram", "encoder"), default="cooc")
    p.add_argument("--out", type=Path, required=True,
                   help="sentence vectors file, or checkpoint for a fresh encoder")
    p.add_argument("--out-word-vectors", type=Path, default=None,
                   help="optional word-vector export (cooc/skipgram)")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="encoder backend: existing checkpoint to encode with")
    p.add_argument("--window", type=int, default=10, help="co-occurrence window W")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension")
    p.add_argument("--heads", type=int, default=4, help="encoder attention heads")
    p.add_argument("--max-seq", type=int, default=64, help="encoder context length")
    p.add_argument("--epochs", type=int, default=10, help="skip-gram epochs")
    p.add_argument("--lr", type=float, default=None, help="learning rate (backend default)")
    p.add_argument("--k-negatives", type=int, default=5, help="skip-gram negatives")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("match", formatter_class=fmt,
                       help="threshold-match rule vectors against policy vectors")
    p.add_argument("--rules", type=Path, required=True)
    p.add_argument("--policies", type=Path, required=True)
    p.add_argument("--tau", type=float, default=0.7, help="cosine threshold (closed bound)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rules-text", type=Path, default=None,
                   help="sentences file for the printed table")
    p.add_argument("--policies-text", type=Path, default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("pseudo-label", formatter_class=fmt,
                       help="build a pseudo training set by ensemble voting")
    p.add_argument("--rules", type=Path, required=True, help="rule sentences JSONL")
    p.add_argument("--policies", type=Path, required=True, help="policy sentences JSONL")
    p.add_argument("--models", default="mock:10",
                   help="comma list: mock:N or file:vectors.vec")
    p.add_argument("--dim", type=int, default=32, help="mock model dimension")
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--vote-cut", default="auto",
                   help='minimum votes to retain a pair; "auto" = ceil past sqrt(N)')
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("finetune", formatter_class=fmt,
                       help="adapt an encoder checkpoint (mlm, mnr, or gpl)")
    p.add_argument("--method", choices=("mlm", "mnr", "gpl"), required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sentences", type=Path, default=None, help="mlm/gpl corpus")
    p.add_argument("--pairs", type=Path, default=None, help="mnr pair file")
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--loss-log", type=Path, default=None)
    p.add_argument("--dump-triplets", type=Path, default=None)
    p.add_argument("--mask-fraction", type=float, default=0.15)
    p.add_argument("--scorer-seed", type=int, default=12345,
                   help="seed of the frozen gpl cross-scorer encoder")
    p.add_argument("--epochs", type=int, default=None, help="default 10")
    p.add_argument("--lr", type=float, default=None, help="default 0.1")
    p.add_argument("--batch-k", type=int, default=None, help="MNR batch size K, default 4")
    p.add_argument("--m-negatives", type=int, default=None, help="GPL negatives M, default 4")
    p.add_argument("--n-queries", type=int, default=None, help="GPL queries/paragraph, default 3")
    p.add_argument("--temperature", type=float, default=None, help="MNR scale, default 20")
    p.add_argument("--seed", type=int, default=None, help="default 0")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="score a model on a validation pair file")
    p.add_argument("--pairs", type=Path, required=True,
                   help='JSON-lines {"rule_text", "policy_text", "votes"}')
    p.add_argument("--vectors", type=Path, default=None, help="word-vector model file")
    p.add_argument("--checkpoint", type=Path, default=None, help="encoder checkpoint")
    p.add_argument("--vocab", type=Path, default=None)
    p.add_argument("--baseline", type=Path, default=None, help="baseline report JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="score report JSON")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (RegmatchError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
