"""Perplexity, LSTM-over-RNN improvement, and the sentence-length x dimension grid."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import CorpusPartition, TokenSequence, as_id_matrix, partition_corpus
from .model import ModelParameters, batch_log_probs, save_model
from .training import TrainingConfig, train

log = logging.getLogger(__name__)

MISSING = "—"


@dataclass
class PerplexityReport:
    perplexity: float
    token_count: int
    sentence_count: int
    model_kind: str
    config: dict = field(default_factory=dict)

    def text(self) -> str:
        lines = [
            f"perplexity\t{self.perplexity:.6f}",
            f"tokens\t{self.token_count}",
            f"sentences\t{self.sentence_count}",
            f"kind\t{self.model_kind}",
        ]
        lines += [f"{k}\t{v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"


def perplexity(sentences, m: ModelParameters, batch_size: int = 64, config: dict | None = None) -> PerplexityReport:
    """``exp(-sum log P(s) / #tokens)`` under the exact softmax, no dropout."""
    ids = as_id_matrix(sentences)
    if ids.size == 0:
        raise ValueError("no sentences to evaluate")
    total = 0.0
    for start in range(0, ids.shape[0], batch_size):
        total += float(batch_log_probs(m, ids[start : start + batch_size]).sum())
    return PerplexityReport(math.exp(-total / ids.size), int(ids.size), int(ids.shape[0]), m.kind, dict(config or {}))


def improvement_percent(rnn_ppl: float, lstm_ppl: float) -> float:
    """Relative perplexity reduction of LSTM over RNN, in percent, one decimal."""
    if not rnn_ppl > 0:
        raise ValueError("RNN perplexity must be positive")
    return round(100.0 * (rnn_ppl - lstm_ppl) / rnn_ppl, 1)


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridSpec:
    sentence_lengths: tuple[int, ...]
    embedding_dims: tuple[int, ...]
    vocab_size: int = 1000
    kinds: tuple[str, ...] = ("rnn", "lstm")
    repetitions: int = 1
    base_seed: int = 0
    per_split: int = 10_000
    min_count: int = 2

    def __post_init__(self):
        if not self.sentence_lengths or not self.embedding_dims:
            raise ValueError("grid axes must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def cells(self) -> list[tuple[int, int]]:
        return [(s, d) for s in self.sentence_lengths for d in self.embedding_dims]


@dataclass
class GridResult:
    # (sent_len, embed_dim, kind) -> mean test perplexity, None when the cell failed
    perplexity: dict[tuple[int, int, str], float | None]
    errors: dict[tuple[int, int, str], str] = field(default_factory=dict)
    cells: list[tuple[int, int]] = field(default_factory=list)

    def improvement(self, sent_len: int, embed_dim: int) -> float | None:
        rnn = self.perplexity.get((sent_len, embed_dim, "rnn"))
        lstm = self.perplexity.get((sent_len, embed_dim, "lstm"))
        if rnn is None or lstm is None:
            return None
        return improvement_percent(rnn, lstm)

    def rows(self) -> list[tuple[int, int, float | None, float | None, float | None]]:
        return [
            (s, d, self.perplexity.get((s, d, "rnn")), self.perplexity.get((s, d, "lstm")), self.improvement(s, d))
            for s, d in self.cells
        ]


def run_grid(source: Sequence[TokenSequence] | CorpusPartition, spec: GridSpec, cfg: TrainingConfig,
             out_dir=None) -> GridResult:
    """Train and test every (sentence length, dimension, kind) cell from scratch.

    ``source`` is either raw token sequences (re-partitioned at each sentence
    length) or a ready partition used as is.  With ``out_dir`` each finished
    cell leaves ``runs/<sent_len>_<embed_dim>_<kind>/result.json`` and is
    skipped on the next call, so an interrupted grid resumes.
    """
    out = Path(out_dir) if out_dir is not None else None
    result = GridResult({}, {}, spec.cells())
    cell_index = 0
    for sent_len in spec.sentence_lengths:
        partition = None
        for dim in spec.embedding_dims:
            for kind in spec.kinds:
                key = (sent_len, dim, kind)
                seed = spec.base_seed + cell_index
                cell_index += 1
                run_dir = out / "runs" / f"{sent_len}_{dim}_{kind}" if out is not None else None
                done = run_dir / "result.json" if run_dir is not None else None
                if done is not None and done.exists():
                    saved = json.loads(done.read_text())
                    result.perplexity[key] = saved["perplexity"]
                    if saved.get("error"):
                        result.errors[key] = saved["error"]
                    continue
                try:
                    if partition is None:
                        partition = _partition_for(source, spec, sent_len)
                    ppls = []
                    for rep in range(spec.repetitions):
                        kcfg = TrainingConfig.for_kind(
                            kind, **{**_overrides(cfg), "embed_dim": dim, "hidden_dim": None,
                                     "seed": seed + rep * 10_007}
                        )
                        res = train(partition, kcfg, kind)
                        ppls.append(perplexity(partition.test, res.params).perplexity)
                        if run_dir is not None:
                            run_dir.mkdir(parents=True, exist_ok=True)
                            (run_dir / f"train_log_{rep}.tsv").write_text(res.log_tsv())
                            save_model(run_dir / f"model_{rep}.bin", res.params, partition.vocab.hash())
                    result.perplexity[key] = float(np.mean(ppls))
                    saved = {"perplexity": result.perplexity[key], "runs": ppls, "seed": seed,
                             "config": kcfg.to_dict()}
                except Exception as e:  # a failed cell must not sink the grid
                    log.error("grid cell %s failed: %s", key, e)
                    result.perplexity[key] = None
                    result.errors[key] = f"{type(e).__name__}: {e}"
                    saved = {"perplexity": None, "error": result.errors[key],
                             "traceback": traceback.format_exc()}
                if run_dir is not None:
                    run_dir.mkdir(parents=True, exist_ok=True)
                    (run_dir / "result.json").write_text(json.dumps(saved, indent=2, sort_keys=True) + "\n")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.tsv").write_text(emit_table(result, "tsv"))
        (out / "grid.md").write_text(emit_table(result, "markdown"))
    return result


def _overrides(cfg: TrainingConfig) -> dict:
    d = asdict(cfg)
    for k in ("learning_rate", "adaptation_rate", "smoothing"):
        d.pop(k)
    return d


def _partition_for(source, spec: GridSpec, sent_len: int) -> CorpusPartition:
    if isinstance(source, CorpusPartition):
        if source.train.shape[1] != sent_len:
            raise ValueError(f"partition has sentence length {source.train.shape[1]}, cell needs {sent_len}")
        return source
    return partition_corpus(source, spec.per_split, spec.base_seed, sent_len=sent_len,
                            vocab_size=spec.vocab_size, min_count=spec.min_count)


def _fmt(x: float | None, digits: int) -> str:
    return MISSING if x is None else f"{x:.{digits}f}"


HEADER = ("sent-len", "embed-dim", "RNN", "LSTM", "improv %")


def emit_table(result: GridResult, format: str = "tsv") -> str:
    """Render grid rows: perplexities to two decimals, improvement to one."""
    rows = result.rows()
    if not rows:
        raise ValueError("empty grid result")
    cells = [(str(s), str(d), _fmt(r, 2), _fmt(l, 2), _fmt(i, 1)) for s, d, r, l, i in rows]
    if format == "tsv":
        return "\t".join(HEADER) + "\n" + "".join("\t".join(c) + "\n" for c in cells)
    if format == "markdown":
        lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
        lines += ["| " + " | ".join(c) + " |" for c in cells]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {format!r}")


def parse_tsv_table(text: str) -> list[tuple[int, int, float | None, float | None, float | None]]:
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    next(reader)

    def num(s):
        return None if s == MISSING else float(s)

    return [(int(r[0]), int(r[1]), num(r[2]), num(r[3]), num(r[4])) for r in reader if r]
