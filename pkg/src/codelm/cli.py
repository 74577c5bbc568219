"""``codelm`` command line: preprocess, train, eval, grid, suggest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as C
from .evaluation import GridSpec, emit_table, perplexity, run_grid
from .model import ModelFormatError, load_model, output_distribution, save_model, step, zero_state
from .training import TrainingConfig, train

log = logging.getLogger("codelm")


class CliError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--embed-dim", type=int, default=50, help="embedding dimension D (and K unless --hidden-dim)")
    g.add_argument("--hidden-dim", type=int, default=None, help="hidden/memory size K")
    g.add_argument("--learning-rate", type=float, default=None, help="RMSprop eta (default per kind)")
    g.add_argument("--adaptation-rate", type=float, default=None, help="RMSprop rho (default per kind)")
    g.add_argument("--smoothing", type=float, default=None, help="RMSprop epsilon (default per kind)")
    g.add_argument("--nce-k", type=int, default=None, help="train with NCE using k noise samples")
    g.add_argument("--dropout", type=float, default=0.5)
    g.add_argument("--clip-norm", type=float, default=5.0)
    g.add_argument("--max-epochs", type=int, default=50)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--batch-size", type=int, default=32)


def _config(args, kind: str) -> TrainingConfig:
    overrides = dict(
        embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, nce_k=args.nce_k,
        dropout_rate=args.dropout, clip_norm=args.clip_norm, max_epochs=args.max_epochs,
        patience=args.patience, batch_size=args.batch_size, seed=args.seed,
    )
    for flag in ("learning_rate", "adaptation_rate", "smoothing"):
        if getattr(args, flag) is not None:
            overrides[flag] = getattr(args, flag)
    try:
        return TrainingConfig.for_kind(kind, **overrides)
    except ValueError as e:
        raise CliError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="codelm", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="lex a source tree into a corpus")
    p.add_argument("source_dir", type=Path)
    p.add_argument("--vocab-size", type=int, default=1000, help="vocabulary size N, specials included")
    p.add_argument("--sent-len", type=int, default=100)
    p.add_argument("--per-split", type=int, default=10_000)
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--ext", action="append", default=None, help="file extension (repeatable, default .java)")
    p.add_argument("--tokens-only", action="store_true",
                   help="print each file's normalized token stream and stop (no corpus split)")

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus directory")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--kind", choices=("rnn", "lstm"), required=True)
    _add_training_flags(p)

    p = sub.add_parser("eval", parents=[common], help="perplexity of a model on a corpus split")
    p.add_argument("model", type=Path)
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--split", choices=C.SPLITS, default="test")

    p = sub.add_parser("grid", parents=[common], help="sentence-length x embedding-dimension experiment")
    p.add_argument("source_dir", type=Path)
    p.add_argument("--sent-lens", type=_int_list, default=[10, 20, 50, 100, 200, 500])
    p.add_argument("--embed-dims", type=_int_list, default=[50])
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--per-split", type=int, default=10_000)
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--ext", action="append", default=None)
    _add_training_flags(p)

    p = sub.add_parser("suggest", parents=[common], help="rank likely next tokens after a context")
    p.add_argument("model", type=Path)
    p.add_argument("--vocab", type=Path, default=None, help="vocab.tsv (default: next to the model)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--context", help="source code text, lexed and normalized")
    src.add_argument("--tokens", help="whitespace-separated, already normalized tokens")
    p.add_argument("--top-k", type=int, default=10)
    return ap


# --------------------------------------------------------------------------


def cmd_preprocess(args, out=sys.stdout) -> int:
    exts = tuple(args.ext or [".java"])
    if not args.source_dir.is_dir():
        raise CliError(f"{args.source_dir}: not a directory")
    seqs, failures = C.read_source_tree(args.source_dir, exts)
    for path, err in failures:
        log.warning("skipped %s: %s", path, err)
    n_tokens = sum(len(s) for s in seqs)
    if n_tokens == 0:
        raise CliError(f"{args.source_dir}: no tokens found in files matching {', '.join(exts)}")
    if args.tokens_only:
        for seq in seqs:
            out.write(C.token_stream_text(seq))
        return 0
    out_dir = args.out or Path("corpus")
    try:
        part = C.partition_corpus(seqs, args.per_split, args.seed, sent_len=args.sent_len,
                                  vocab_size=args.vocab_size, min_count=args.min_count)
    except ValueError as e:
        raise CliError(str(e)) from e
    part.manifest["extensions"] = list(exts)
    part.manifest["skipped_files"] = [p for p, _ in failures]
    C.write_corpus(part, out_dir)
    unique = len({t for s in seqs for t in s.texts()})
    print(f"files\t{len(seqs)}", file=out)
    print(f"tokens\t{n_tokens}", file=out)
    print(f"unique_tokens\t{unique}", file=out)
    print(f"vocabulary\t{len(part.vocab)}", file=out)
    for k in C.SPLITS:
        print(f"{k}_sentences\t{part.manifest['counts'][k]}", file=out)
    return 0


def _load_corpus(path: Path) -> C.CorpusPartition:
    try:
        return C.load_corpus(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load corpus {path}: {e}") from e


def cmd_train(args, out=sys.stdout) -> int:
    part = _load_corpus(args.corpus_dir)
    cfg = _config(args, args.kind)
    out_dir = args.out or Path(f"model_{args.kind}")
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"kind": args.kind, "objective": cfg.objective, **cfg.to_dict(),
            "vocab_size": len(part.vocab), "sent_len": int(part.train.shape[1])}
    header = "".join(f"# {k}={v}\n" for k, v in echo.items())
    log_path = out_dir / "train_log.tsv"
    log_path.write_text(header + "# epoch\ttrain_loss_per_token\tvalid_ppl\tseconds\n")
    sys.stderr.write(header)

    def on_epoch(rec):
        with log_path.open("a") as fh:
            fh.write(rec.tsv() + "\n")

    res = train(part, cfg, args.kind, on_epoch=on_epoch)
    save_model(out_dir / "model.bin", res.params, part.vocab.hash(), res.optimizer_state)
    (out_dir / "vocab.tsv").write_text(part.vocab.to_tsv(), encoding="utf-8")
    (out_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    print(f"best_epoch\t{res.best_epoch}", file=out)
    print(f"valid_ppl\t{res.log[res.best_epoch - 1].valid_ppl:.6f}", file=out)
    print(f"model\t{out_dir / 'model.bin'}", file=out)
    return 0


def _load_model(path: Path, vocab_hash: bytes | None = None):
    if not path.is_file():
        raise CliError(f"{path}: no such model file")
    try:
        params, _, _ = load_model(path, vocab_hash)
    except ModelFormatError as e:
        raise CliError(f"{path}: {e}") from e
    return params


def cmd_eval(args, out=sys.stdout) -> int:
    part = _load_corpus(args.corpus_dir)
    params = _load_model(args.model, part.vocab.hash())
    rep = perplexity(getattr(part, args.split), params,
                     config={"split": args.split, "N": params.N, "D": params.D, "K": params.K})
    out.write(rep.text())
    return 0


def cmd_grid(args, out=sys.stdout) -> int:
    exts = tuple(args.ext or [".java"])
    seqs, failures = C.read_source_tree(args.source_dir, exts)
    for path, err in failures:
        log.warning("skipped %s: %s", path, err)
    if not seqs:
        raise CliError(f"{args.source_dir}: no source files")
    spec = GridSpec(tuple(args.sent_lens), tuple(args.embed_dims), args.vocab_size,
                    repetitions=args.repetitions, base_seed=args.seed, per_split=args.per_split,
                    min_count=args.min_count)
    cfg = _config(args, "rnn")
    result = run_grid(seqs, spec, cfg, args.out or Path("grid"))
    out.write(emit_table(result, "tsv"))
    return 0 if not result.errors else 1


def suggest(params, vocab: C.Vocabulary, context_ids: list[int], top_k: int) -> list[tuple[int, str, float]]:
    """Top ``top_k`` next tokens as ``(id, text, prob)``, probability desc then id asc."""
    state = zero_state(params)
    for t in context_ids:
        state = step(state, int(t), params)
    probs = output_distribution(state.h, params.U)
    order = np.lexsort((np.arange(len(probs)), -probs))[:top_k]
    return [(int(i), vocab.text_of(int(i)), float(probs[i])) for i in order]


def cmd_suggest(args, out=sys.stdout) -> int:
    vocab_path = args.vocab or args.model.parent / "vocab.tsv"
    try:
        vocab = C.Vocabulary.from_tsv(vocab_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError(f"cannot read vocabulary: {e}") from e
    params = _load_model(args.model, vocab.hash())
    if args.tokens is not None:
        texts = args.tokens.split()
    else:
        try:
            texts = C.normalize_sequence(C.lex_source(args.context)).texts()
        except C.LexError as e:
            raise CliError(f"cannot lex context: {e}") from e
    if not texts:
        raise CliError("context is empty")
    ids = C.encode(texts, vocab)
    if all(i == vocab.unk_id for i in ids):
        log.warning("every context token is out of vocabulary; continuing with <unk>")
    if args.top_k < 1:
        raise CliError("--top-k must be >= 1")
    for rank, (_, text, p) in enumerate(suggest(params, vocab, ids, args.top_k), 1):
        out.write(f"{rank}\t{text}\t{p:.12g}\n")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "suggest": cmd_suggest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, sys.stdout)
    except CliError as e:
        print(f"codelm {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
