"""Lexing, normalization, vocabulary and corpus partitioning for Java-like code."""

from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import SeededRng

NUM = "<num>"
STR = "<str>"
UNK = "<unk>"
SPECIALS = (NUM, STR, UNK)

JAVA_KEYWORDS = frozenset(
    """
    abstract assert boolean break byte case catch char class const continue
    default do double else enum extends final finally float for goto if
    implements import instanceof int interface long native new package private
    protected public return short static strictfp super switch synchronized
    this throw throws transient try void volatile while
    """.split()
)

# longest first so the scanner can take the first prefix match
OPERATORS = sorted(
    """
    >>>= <<= >>= >>> -> :: ++ -- && || == != <= >= += -= *= /= &= |= ^= %= << >>
    + - * / % = < > ! ~ ? : & | ^ @
    """.split(),
    key=len,
    reverse=True,
)
PUNCTUATION = ("...", "(", ")", "{", "}", "[", "]", ";", ",", ".")


class LexError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TokenKind(enum.Enum):
    IDENTIFIER = "identifier"
    KEYWORD = "keyword"
    NUMBER = "number-literal"
    STRING = "string-literal"
    CHAR = "char-literal"
    OPERATOR = "operator"
    PUNCTUATION = "punctuation"
    SPECIAL = "special"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind
    line: int = 0

    def __post_init__(self):
        if not self.text:
            raise ValueError("token text must be non-empty")


@dataclass
class TokenSequence:
    tokens: list[Token]
    source_id: str = ""

    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __len__(self):
        return len(self.tokens)


# --------------------------------------------------------------------------
# lexer


def _is_ident_start(ch: str) -> bool:
    return ch.isalpha() or ch in "_$"


def _is_ident_part(ch: str) -> bool:
    return ch.isalnum() or ch in "_$"


def _scan_number(text: str, i: int) -> int:
    """Return the end index of the numeric literal starting at ``i``."""
    n = len(text)
    j = i
    if text.startswith(("0x", "0X"), i):
        j += 2
        while j < n and (text[j] in "0123456789abcdefABCDEF_."):
            j += 1
        # hex floating point exponent
        if j < n and text[j] in "pP":
            j += 1
            if j < n and text[j] in "+-":
                j += 1
            while j < n and text[j].isdigit():
                j += 1
    elif text.startswith(("0b", "0B"), i):
        j += 2
        while j < n and text[j] in "01_":
            j += 1
    else:
        while j < n and (text[j].isdigit() or text[j] == "_"):
            j += 1
        if j < n and text[j] == "." and not text.startswith("...", j):
            j += 1
            while j < n and (text[j].isdigit() or text[j] == "_"):
                j += 1
        if j < n and text[j] in "eE":
            k = j + 1
            if k < n and text[k] in "+-":
                k += 1
            if k < n and text[k].isdigit():
                j = k
                while j < n and text[j].isdigit():
                    j += 1
    if j < n and text[j] in "lLfFdD":
        j += 1
    return j


def _scan_quoted(text: str, i: int, quote: str, line: int) -> int:
    n = len(text)
    j = i + 1
    what = "string" if quote == '"' else "char"
    while j < n:
        ch = text[j]
        if ch == "\\":
            j += 2
            continue
        if ch == quote:
            return j + 1
        if ch == "\n":
            break
        j += 1
    raise LexError(f"unterminated {what} literal", line)


def lex_source(text: str, source_id: str = "") -> TokenSequence:
    """Split Java-like source into tokens, dropping whitespace and comments.

    String and char literals are kept whole (quotes included) and multi-char
    operators are single tokens.  Raises :class:`LexError` on unterminated
    literals or block comments, and on characters outside the language.
    """
    tokens: list[Token] = []
    i, n, line = 0, len(text), 1
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch.isspace():
            i += 1
        elif text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise LexError("unterminated block comment", line)
            line += text.count("\n", i, j)
            i = j + 2
        elif _is_ident_start(ch):
            j = i + 1
            while j < n and _is_ident_part(text[j]):
                j += 1
            word = text[i:j]
            kind = TokenKind.KEYWORD if word in JAVA_KEYWORDS else TokenKind.IDENTIFIER
            tokens.append(Token(word, kind, line))
            i = j
        elif ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = _scan_number(text, i)
            tokens.append(Token(text[i:j], TokenKind.NUMBER, line))
            i = j
        elif text.startswith('"""', i):
            j = text.find('"""', i + 3)
            if j < 0:
                raise LexError("unterminated text block", line)
            tokens.append(Token(text[i : j + 3], TokenKind.STRING, line))
            line += text.count("\n", i, j)
            i = j + 3
        elif ch == '"' or ch == "'":
            j = _scan_quoted(text, i, ch, line)
            kind = TokenKind.STRING if ch == '"' else TokenKind.CHAR
            tokens.append(Token(text[i:j], kind, line))
            i = j
        else:
            if text.startswith("...", i):
                tokens.append(Token("...", TokenKind.PUNCTUATION, line))
                i += 3
                continue
            for op in OPERATORS:
                if text.startswith(op, i):
                    tokens.append(Token(op, TokenKind.OPERATOR, line))
                    i += len(op)
                    break
            else:
                if ch not in PUNCTUATION:
                    raise LexError(f"unexpected character {ch!r}", line)
                tokens.append(Token(ch, TokenKind.PUNCTUATION, line))
                i += 1
    return TokenSequence(tokens, source_id)


def normalize_token(t: Token) -> Token:
    if t.kind is TokenKind.NUMBER:
        return Token(NUM, TokenKind.SPECIAL, t.line)
    if t.kind in (TokenKind.STRING, TokenKind.CHAR):
        return Token(STR, TokenKind.SPECIAL, t.line)
    return t


def normalize_sequence(seq: TokenSequence) -> TokenSequence:
    return TokenSequence([normalize_token(t) for t in seq.tokens], seq.source_id)


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    """Dense token <-> id map.  ``<num>``, ``<str>``, ``<unk>`` hold ids 0, 1, 2."""

    tokens: list[str]
    counts: list[int]
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(self.tokens) != len(self.counts):
            raise ValueError("tokens and counts differ in length")
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def num_id(self) -> int:
        return 0

    @property
    def str_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, text: str):
        return text in self.id_of

    def text_of(self, i: int) -> str:
        return self.tokens[i]

    def frequency(self, i: int) -> int:
        return self.counts[i]

    def lookup(self, text: str) -> int:
        return self.id_of.get(text, self.unk_id)

    def hash(self) -> bytes:
        """SHA-256 over the id-ordered token list; used to pair models with corpora."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).digest()

    def to_tsv(self) -> str:
        return "".join(f"{i}\t{t}\t{c}\n" for i, (t, c) in enumerate(zip(self.tokens, self.counts)))

    @classmethod
    def from_tsv(cls, text: str) -> "Vocabulary":
        tokens, counts = [], []
        for expected, row in enumerate(text.splitlines()):
            if not row:
                continue
            i, tok, count = row.split("\t")
            if int(i) != expected:
                raise ValueError(f"vocabulary ids not dense at row {expected}")
            tokens.append(tok)
            counts.append(int(count))
        return cls(tokens, counts)

    @classmethod
    def from_tokens(cls, regular: Sequence[str]) -> "Vocabulary":
        """Vocabulary of the specials plus ``regular`` in the given order, zero counts."""
        toks = list(SPECIALS) + [t for t in regular if t not in SPECIALS]
        return cls(toks, [0] * len(toks))


def _texts(seq) -> list[str]:
    if isinstance(seq, TokenSequence):
        return seq.texts()
    return list(seq)


def build_vocabulary(
    sequences: Iterable[TokenSequence], N: int, min_count: int = 2
) -> Vocabulary:
    """Keep the ``N - 3`` most frequent non-special tokens seen at least ``min_count`` times.

    Ranking is by count descending, then text ascending.  Sequences should
    already be normalized.
    """
    if N < len(SPECIALS) + 1:
        raise ValueError(f"N must be at least {len(SPECIALS) + 1}, got {N}")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq: Counter[str] = Counter()
    for seq in sequences:
        freq.update(_texts(seq))
    if not freq:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    regular = [t for t, c in freq.items() if t not in SPECIALS and c >= min_count]
    regular.sort(key=lambda t: (-freq[t], t))
    regular = regular[: N - len(SPECIALS)]
    kept = set(regular)
    unk_count = sum(c for t, c in freq.items() if t not in kept and t not in SPECIALS)
    counts = [freq[NUM], freq[STR], freq[UNK] + unk_count] + [freq[t] for t in regular]
    return Vocabulary(list(SPECIALS) + regular, counts)


def encode(seq, v: Vocabulary) -> list[int]:
    return [v.lookup(t) for t in _texts(seq)]


def decode(ids: Iterable[int], v: Vocabulary) -> list[str]:
    return [v.tokens[int(i)] for i in ids]


# --------------------------------------------------------------------------
# sentences and partitions


@dataclass(frozen=True, eq=False)
class Sentence:
    token_ids: np.ndarray

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    def __len__(self):
        return self.length


def split_sentences(ids: Sequence[int], sent_len: int) -> list[Sentence]:
    """Cut ``ids`` into consecutive non-overlapping windows; a short tail is dropped."""
    if sent_len < 2:
        raise ValueError(f"sent_len must be >= 2, got {sent_len}")
    arr = np.asarray(ids, dtype=np.int64)
    count = arr.shape[0] // sent_len
    return [Sentence(arr[i * sent_len : (i + 1) * sent_len].copy()) for i in range(count)]


def as_id_matrix(sentences) -> np.ndarray:
    """Stack sentences (or an existing 2-D array) into an ``(S, L)`` int64 array."""
    if isinstance(sentences, np.ndarray):
        arr = sentences
        if arr.ndim == 1:
            arr = arr[None, :]
        return arr.astype(np.int64, copy=False)
    if isinstance(sentences, Sentence):
        return sentences.token_ids[None, :].astype(np.int64)
    rows = [s.token_ids if isinstance(s, Sentence) else np.asarray(s) for s in sentences]
    if not rows:
        raise ValueError("no sentences")
    if all(r.ndim == 0 for r in rows):  # a flat list of ids is one sentence
        return np.asarray(rows, dtype=np.int64)[None, :]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"sentences differ in length: {sorted(lengths)}")
    return np.stack(rows).astype(np.int64)


class InsufficientCorpusError(ValueError):
    pass


SPLITS = ("train", "valid", "test")


@dataclass
class CorpusPartition:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: Vocabulary
    sources: dict[str, list[str]]
    manifest: dict

    @property
    def validation(self) -> np.ndarray:
        return self.valid

    def sentences(self, split: str) -> list[Sentence]:
        return [Sentence(row) for row in getattr(self, split)]


def _doc_digest(seq: TokenSequence) -> str:
    return hashlib.sha256(" ".join(seq.texts()).encode("utf-8")).hexdigest()


def partition_corpus(
    sequences: Sequence[TokenSequence],
    per_split: int,
    seed: int,
    *,
    sent_len: int,
    vocab_size: int,
    min_count: int = 2,
) -> CorpusPartition:
    """Assign whole documents to train/valid/test, then cut fixed-length sentences.

    Documents are shuffled with ``seed`` and each goes to whichever split
    currently has the fewest sentences, until every split holds
    ``per_split``.  The vocabulary comes from training documents only, so
    tokens unseen in training encode to ``<unk>`` elsewhere.
    """
    if per_split < 1:
        raise ValueError("per_split must be >= 1")
    seqs = [normalize_sequence(s) for s in sequences]
    ids = [s.source_id for s in seqs]
    if len(set(ids)) != len(ids):
        raise ValueError("source ids must be unique")
    order = SeededRng(seed).permutation(len(seqs))
    assigned: dict[str, list[int]] = {k: [] for k in SPLITS}
    have = dict.fromkeys(SPLITS, 0)
    for doc in order:
        if min(have.values()) >= per_split:
            break
        n_sent = len(seqs[doc]) // sent_len
        if n_sent == 0:
            continue
        target = min((k for k in SPLITS if have[k] < per_split), key=lambda k: have[k])
        assigned[target].append(int(doc))
        have[target] += n_sent
    if min(have.values()) < per_split:
        raise InsufficientCorpusError(
            f"corpus yields only {have['train']}/{have['valid']}/{have['test']} "
            f"train/valid/test sentences of length {sent_len}; {per_split} needed per split"
        )

    vocab = build_vocabulary((seqs[d] for d in assigned["train"]), vocab_size, min_count)
    out: dict[str, np.ndarray] = {}
    for split in SPLITS:
        rows = []
        for d in assigned[split]:
            rows.extend(s.token_ids for s in split_sentences(encode(seqs[d], vocab), sent_len))
        out[split] = np.stack(rows[:per_split]).astype(np.int64)

    sources = {k: [seqs[d].source_id for d in assigned[k]] for k in SPLITS}
    manifest = {
        "seed": int(seed),
        "sent_len": int(sent_len),
        "vocab_size": int(vocab_size),
        "vocab_actual": len(vocab),
        "min_count": int(min_count),
        "per_split": int(per_split),
        "counts": {k: int(out[k].shape[0]) for k in SPLITS},
        "sources": {
            k: [{"id": seqs[d].source_id, "sha256": _doc_digest(seqs[d])} for d in assigned[k]]
            for k in SPLITS
        },
        "vocab_sha256": vocab.hash().hex(),
    }
    return CorpusPartition(out["train"], out["valid"], out["test"], vocab, sources, manifest)


# --------------------------------------------------------------------------
# disk formats


def read_source_tree(root, extensions=(".java",)) -> tuple[list[TokenSequence], list[tuple[str, str]]]:
    """Lex every matching file under ``root`` in sorted path order.

    Returns the token sequences and a list of ``(path, error)`` for files
    that failed to lex; those are skipped.
    """
    root = Path(root)
    seqs, failures = [], []
    paths = sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix in tuple(extensions)
    )
    for p in paths:
        rel = p.relative_to(root).as_posix()
        try:
            text = p.read_text(encoding="utf-8")
            seqs.append(normalize_sequence(lex_source(text, rel)))
        except (LexError, UnicodeDecodeError) as e:
            failures.append((rel, str(e)))
    return seqs, failures


def token_stream_text(seq: TokenSequence) -> str:
    """One whitespace-separated line of normalized token texts."""
    return " ".join(seq.texts()) + "\n"


def write_corpus(part: CorpusPartition, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        arr = getattr(part, split)
        (out / f"{split}.txt").write_text("".join(" ".join(map(str, row)) + "\n" for row in arr))
    (out / "vocab.tsv").write_text(part.vocab.to_tsv(), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(part.manifest, indent=2, sort_keys=True) + "\n")


def read_split(path) -> np.ndarray:
    rows = [list(map(int, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no sentences")
    return np.asarray(rows, dtype=np.int64)


def load_corpus(corpus_dir) -> CorpusPartition:
    d = Path(corpus_dir)
    vocab = Vocabulary.from_tsv((d / "vocab.tsv").read_text(encoding="utf-8"))
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("vocab_sha256") not in (None, vocab.hash().hex()):
        raise ValueError(f"{d}: vocab.tsv does not match manifest.json")
    splits = {k: read_split(d / f"{k}.txt") for k in SPLITS}
    for k, arr in splits.items():
        if arr.max() >= len(vocab) or arr.min() < 0:
            raise ValueError(f"{d}/{k}.txt: token id outside vocabulary")
    sources = {k: [s["id"] for s in manifest.get("sources", {}).get(k, [])] for k in SPLITS}
    return CorpusPartition(splits["train"], splits["valid"], splits["test"], vocab, sources, manifest)
