"""Small artificial token languages with known structure, for tests and demos."""

from __future__ import annotations

import string

import numpy as np

from .corpus import CorpusPartition, Vocabulary
from .numerics import SeededRng


def _partition(vocab: Vocabulary, splits: dict[str, np.ndarray], **manifest) -> CorpusPartition:
    counts = {k: int(v.shape[0]) for k, v in splits.items()}
    return CorpusPartition(splits["train"], splits["valid"], splits["test"], vocab,
                           {k: [] for k in splits}, {"synthetic": True, "counts": counts, **manifest})


def cyclic_vocabulary(n_symbols: int = 26) -> Vocabulary:
    return Vocabulary.from_tokens(list(string.ascii_lowercase[:n_symbols]))


def cyclic_sentences(n: int, sent_len: int, rng: SeededRng, n_symbols: int = 26) -> np.ndarray:
    """``a b c ... z a b ...`` windows starting at random letters."""
    starts = rng.integers(0, n_symbols, n)
    offs = (starts[:, None] + np.arange(sent_len)[None, :]) % n_symbols
    return offs + 3  # skip the special ids


def cyclic_partition(per_split: int = 200, sent_len: int = 20, seed: int = 0) -> CorpusPartition:
    rng = SeededRng(seed)
    splits = {k: cyclic_sentences(per_split, sent_len, rng) for k in ("train", "valid", "test")}
    return _partition(cyclic_vocabulary(), splits, language="cyclic", seed=seed)


def open_close_vocabulary(n_pairs: int, n_fillers: int = 20, vocab_size: int | None = None) -> Vocabulary:
    toks = [f"f{i}" for i in range(n_fillers)]
    toks += [f"open{i}" for i in range(n_pairs)] + [f"close{i}" for i in range(n_pairs)]
    if vocab_size is not None:
        spare = vocab_size - 3 - len(toks)
        if spare < 0:
            raise ValueError(f"{len(toks) + 3} tokens do not fit a vocabulary of {vocab_size}")
        toks += [f"spare{i}" for i in range(spare)]
    return Vocabulary.from_tokens(toks)


def open_close_sentences(n: int, sent_len: int, gap: int, rng: SeededRng, *, n_pairs: int = 13,
                         n_fillers: int = 20, openers_per_block: int = 1) -> np.ndarray:
    """Sentences made of back-to-back blocks ``open.. filler*gap ..close``.

    Each block opens ``openers_per_block`` random brackets, emits ``gap``
    fillers drawn uniformly from the filler alphabet, then closes them in
    reverse order, so the innermost closer sits exactly ``gap`` fillers
    after its opener.  Every sentence starts on a block boundary.
    """
    filler0 = 3
    open0 = filler0 + n_fillers
    close0 = open0 + n_pairs
    r = openers_per_block
    block = 2 * r + gap
    n_blocks = -(-sent_len // block)
    out = np.empty((n, n_blocks * block), dtype=np.int64)
    for b in range(n_blocks):
        base = b * block
        kinds = rng.integers(0, n_pairs, (n, r))
        out[:, base : base + r] = open0 + kinds
        out[:, base + r : base + r + gap] = filler0 + rng.integers(0, n_fillers, (n, gap))
        out[:, base + r + gap : base + block] = close0 + kinds[:, ::-1]
    return out[:, :sent_len]


def open_close_partition(n_train: int, n_eval: int, sent_len: int, gap: int, seed: int = 0, *,
                         vocab_size: int = 50, n_pairs: int = 13, n_fillers: int = 20,
                         openers_per_block: int = 1) -> CorpusPartition:
    rng = SeededRng(seed)
    kw = dict(n_pairs=n_pairs, n_fillers=n_fillers, openers_per_block=openers_per_block)
    splits = {
        "train": open_close_sentences(n_train, sent_len, gap, rng, **kw),
        "valid": open_close_sentences(n_eval, sent_len, gap, rng, **kw),
        "test": open_close_sentences(n_eval, sent_len, gap, rng, **kw),
    }
    vocab = open_close_vocabulary(n_pairs, n_fillers, vocab_size)
    return _partition(vocab, splits, language="open-close", gap=gap, seed=seed, **kw)


def markov_partition(per_split: int, sent_len: int, vocab_size: int = 50, seed: int = 0,
                     branching: int = 3) -> CorpusPartition:
    """First-order Markov chain where each symbol has ``branching`` likely successors."""
    rng = SeededRng(seed)
    n_sym = vocab_size - 3
    trans = np.full((n_sym, n_sym), 0.02 / n_sym)
    for s in range(n_sym):
        nxt = rng.permutation(n_sym)[:branching]
        trans[s, nxt] += rng.uniform(0.5, 1.5, branching)
    trans /= trans.sum(axis=1, keepdims=True)
    cdf = np.cumsum(trans, axis=1)

    def draw(n):
        out = np.empty((n, sent_len), dtype=np.int64)
        cur = rng.integers(0, n_sym, n)
        out[:, 0] = cur
        for t in range(1, sent_len):
            u = rng.random(n)
            cur = np.minimum((cdf[cur] < u[:, None]).sum(axis=1), n_sym - 1)
            out[:, t] = cur
        return out + 3

    splits = {k: draw(per_split) for k in ("train", "valid", "test")}
    vocab = Vocabulary.from_tokens([f"s{i}" for i in range(n_sym)])
    return _partition(vocab, splits, language="markov", seed=seed)
