"""Embedding table, simple-RNN and LSTM cells, softmax output layer.

Shapes follow the column-vector convention: the embedding table is ``D x N``
(one column per token id), recurrent matrices map ``R^D`` / ``R^K`` into
``R^K`` and the output matrix ``U`` is ``N x K`` (one row per token).

Two evaluation paths exist.  The step functions (:func:`rnn_step`,
:func:`lstm_step`, :func:`output_distribution`) work on single vectors and
back :func:`forward_sequence` / :func:`sequence_log_prob`.  :func:`run_batch`
unrolls a whole ``(B, T)`` id matrix at once and is what training and
perplexity evaluation use; tests hold the two paths against each other.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, SeededRng, log_softmax, matvec, sigmoid, softmax

KINDS = ("rnn", "lstm")
GATES = ("forget", "input", "output", "candidate")
INIT_SCALE = 0.05


@dataclass
class RnnParameters:
    b: np.ndarray  # (K,)
    W_tran: np.ndarray  # (K, K)
    W_in: np.ndarray  # (K, D)

    def named_arrays(self):
        return [("b", self.b), ("W_tran", self.W_tran), ("W_in", self.W_in)]


@dataclass
class LstmParameters:
    """Gate weights stacked row-wise in the order forget, input, output, candidate."""

    W_in: np.ndarray  # (4K, D)
    W_rec: np.ndarray  # (4K, K)
    b: np.ndarray  # (4K,)

    @property
    def K(self) -> int:
        return self.b.shape[0] // 4

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views ``(W_g_in, W_g_rec, b_g)`` for one gate; writes go through."""
        g = GATES.index(name)
        sl = slice(g * self.K, (g + 1) * self.K)
        return self.W_in[sl], self.W_rec[sl], self.b[sl]

    def named_arrays(self):
        return [("W_in", self.W_in), ("W_rec", self.W_rec), ("b", self.b)]


@dataclass
class ModelParameters:
    kind: str
    embedding: np.ndarray  # (D, N)
    cell: RnnParameters | LstmParameters
    U: np.ndarray  # (N, K)
    # scalar added to every NCE score; cancels out of the exact softmax
    nce_offset: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        want = RnnParameters if self.kind == "rnn" else LstmParameters
        if not isinstance(self.cell, want):
            raise TypeError(f"{self.kind} model needs {want.__name__}")

    @property
    def N(self) -> int:
        return self.embedding.shape[1]

    @property
    def D(self) -> int:
        return self.embedding.shape[0]

    @property
    def K(self) -> int:
        return self.U.shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All learnable arrays in serialization order."""
        return (
            [("embedding", self.embedding)]
            + [(f"cell.{n}", a) for n, a in self.cell.named_arrays()]
            + [("U", self.U), ("nce_offset", self.nce_offset)]
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())

    def map(self, fn) -> "ModelParameters":
        """New parameter set with ``fn`` applied to every array."""
        cell_cls = type(self.cell)
        cell = cell_cls(**{n: fn(a) for n, a in self.cell.named_arrays()})
        return ModelParameters(self.kind, fn(self.embedding), cell, fn(self.U), fn(self.nce_offset))

    def copy(self) -> "ModelParameters":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParameters":
        return self.map(np.zeros_like)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, a in self.named_arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


# A gradient has exactly the structure of the parameters it differentiates.
Gradients = ModelParameters


@dataclass
class StepState:
    h: np.ndarray
    c: np.ndarray | None = None


def init_parameters(kind: str, N: int, D: int, K: int | None = None, rng: SeededRng | None = None,
                    *, scale: float = INIT_SCALE) -> ModelParameters:
    """Weights uniform in ``[-scale, scale]``; biases zero except the LSTM forget bias (1.0)."""
    K = D if K is None else K
    if min(N, D, K) < 1:
        raise ValueError("N, D and K must all be >= 1")
    rng = rng if rng is not None else SeededRng(0)

    def u(*shape):
        return rng.uniform(-scale, scale, shape)

    embedding = u(D, N)
    if kind == "rnn":
        cell = RnnParameters(b=np.zeros(K), W_tran=u(K, K), W_in=u(K, D))
    elif kind == "lstm":
        cell = LstmParameters(W_in=u(4 * K, D), W_rec=u(4 * K, K), b=np.zeros(4 * K))
        cell.gate("forget")[2][:] = 1.0
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    U = u(N, K)
    return ModelParameters(kind, embedding, cell, U, np.array([-np.log(N)]))


def zero_state(m: ModelParameters) -> StepState:
    K = m.K
    return StepState(np.zeros(K), np.zeros(K) if m.kind == "lstm" else None)


# --------------------------------------------------------------------------
# single-vector path


def embed(token_id: int, table: np.ndarray) -> np.ndarray:
    N = table.shape[1]
    if not 0 <= token_id < N:
        raise IndexError(f"token id {token_id} outside [0, {N})")
    return table[:, token_id].copy()


def rnn_step(prev: StepState, x: np.ndarray, p: RnnParameters) -> StepState:
    a = p.b + matvec(p.W_tran, prev.h) + matvec(p.W_in, x)
    return StepState(np.tanh(a))


def lstm_step(prev: StepState, x: np.ndarray, p: LstmParameters) -> StepState:
    if prev.c is None:
        raise ValueError("LSTM step needs a memory cell in the previous state")
    z = matvec(p.W_in, x) + matvec(p.W_rec, prev.h) + p.b
    K = p.K
    f = sigmoid(z[:K])
    i = sigmoid(z[K : 2 * K])
    o = sigmoid(z[2 * K : 3 * K])
    g = np.tanh(z[3 * K :])
    c = f * prev.c + i * g
    return StepState(o * np.tanh(c), c)


def step(prev: StepState, token_id: int, m: ModelParameters) -> StepState:
    x = embed(token_id, m.embedding)
    if m.kind == "rnn":
        return rnn_step(prev, x, m.cell)
    return lstm_step(prev, x, m.cell)


def output_distribution(h: np.ndarray, U: np.ndarray) -> np.ndarray:
    return softmax(matvec(U, h))


def forward_sequence(sentence, m: ModelParameters) -> tuple[list[StepState], list[np.ndarray]]:
    """Consume the tokens one by one.

    Returns the state after each token and, for each of those states, the
    predictive distribution over the token that would come next.
    """
    ids = _ids(sentence)
    if len(ids) == 0:
        raise ValueError("empty sentence")
    state = zero_state(m)
    states, dists = [], []
    for t in ids:
        state = step(state, int(t), m)
        states.append(state)
        dists.append(output_distribution(state.h, m.U))
    return states, dists


def sequence_log_prob(sentence, m: ModelParameters) -> float:
    """``log P(w_1) + sum_t log P(w_t | w_<t)``, with ``P(w_1)`` read from the zero state."""
    ids = _ids(sentence)
    if len(ids) == 0:
        raise ValueError("empty sentence")
    state = zero_state(m)
    total = 0.0
    for pos, t in enumerate(ids):
        total += float(np.log(output_distribution(state.h, m.U)[t]))
        if pos + 1 < len(ids):
            state = step(state, int(t), m)
    return total


def mean_pool_representation(states) -> np.ndarray:
    states = list(states)
    if not states:
        raise ValueError("cannot pool an empty state list")
    return np.mean([s.h for s in states], axis=0)


def _ids(sentence) -> np.ndarray:
    ids = getattr(sentence, "token_ids", sentence)
    return np.asarray(ids, dtype=np.int64).reshape(-1)


# --------------------------------------------------------------------------
# batched path


@dataclass
class BatchTrace:
    """Everything a backward pass needs from one batched forward pass.

    ``H`` holds the predicting states ``h_0 .. h_{T-1}`` (``h_0`` = 0) after
    output dropout, shape ``(B, T, K)``; state ``t`` predicts token ``t``.
    """

    ids: np.ndarray
    X: np.ndarray  # (B, T-1, D) embedded inputs after dropout
    H_raw: np.ndarray  # (B, T, K) states before output dropout
    H: np.ndarray
    input_mask: np.ndarray | None
    output_mask: np.ndarray | None
    gates: np.ndarray | None = None  # LSTM (B, T-1, 4K): f, i, o activations and g
    C: np.ndarray | None = None  # LSTM (B, T, K) memory cells, C[:, 0] = 0


def run_batch(m: ModelParameters, ids: np.ndarray, input_mask=None, output_mask=None) -> BatchTrace:
    """Unroll the cell over ``ids[:, :-1]`` to get states predicting every position."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, length) matrix")
    B, T = ids.shape
    K = m.K
    steps = T - 1
    X = m.embedding.T[ids[:, :steps]]  # (B, steps, D)
    if input_mask is not None:
        X = X * input_mask[:, :steps]
    H_raw = np.zeros((B, T, K))
    gates = C = None
    if m.kind == "rnn":
        p = m.cell
        pre = X @ p.W_in.T + p.b
        Wt = p.W_tran.T
        h = H_raw[:, 0]
        for t in range(steps):
            h = np.tanh(pre[:, t] + h @ Wt)
            H_raw[:, t + 1] = h
    else:
        p = m.cell
        pre = X @ p.W_in.T + p.b
        Wr = p.W_rec.T
        gates = np.empty((B, steps, 4 * K))
        C = np.zeros((B, T, K))
        h = H_raw[:, 0]
        c = C[:, 0]
        for t in range(steps):
            z = pre[:, t] + h @ Wr
            a = gates[:, t]
            a[:, : 3 * K] = sigmoid(z[:, : 3 * K])
            a[:, 3 * K :] = np.tanh(z[:, 3 * K :])
            c = a[:, :K] * c + a[:, K : 2 * K] * a[:, 3 * K :]
            h = a[:, 2 * K : 3 * K] * np.tanh(c)
            C[:, t + 1] = c
            H_raw[:, t + 1] = h
    H = H_raw if output_mask is None else H_raw * output_mask
    return BatchTrace(ids, X, H_raw, H, input_mask, output_mask, gates, C)


def batch_log_probs(m: ModelParameters, ids: np.ndarray) -> np.ndarray:
    """Per-sentence log-probability for every row of ``ids``, exact softmax."""
    trace = run_batch(m, ids)
    logp = log_softmax(trace.H @ m.U.T)
    return np.take_along_axis(logp, trace.ids[..., None], axis=-1)[..., 0].sum(axis=1)


def backprop_states(m: ModelParameters, trace: BatchTrace, dH: np.ndarray, grads: Gradients) -> None:
    """Accumulate into ``grads`` the cell and embedding gradients given ``dL/dH``.

    ``dH`` is the loss gradient w.r.t. ``trace.H`` (the post-dropout
    predicting states).  Full backpropagation through time, no truncation.
    """
    B, T, K = trace.H.shape
    steps = T - 1
    if steps == 0:
        return
    if trace.output_mask is not None:
        dH = dH * trace.output_mask
    H_prev = trace.H_raw[:, :steps]  # state fed into each step
    if m.kind == "rnn":
        p, g = m.cell, grads.cell
        H_out = trace.H_raw[:, 1:]
        DA = np.empty((B, steps, K))
        Wt = p.W_tran
        dh_next = np.zeros((B, K))
        for t in range(steps - 1, -1, -1):
            da = (dH[:, t + 1] + dh_next) * (1.0 - H_out[:, t] ** 2)
            DA[:, t] = da
            dh_next = da @ Wt
        flat = DA.reshape(-1, K)
        g.W_tran += flat.T @ H_prev.reshape(-1, K)
        g.W_in += flat.T @ trace.X.reshape(-1, trace.X.shape[-1])
        g.b += flat.sum(axis=0)
        dX = DA @ p.W_in
    else:
        p, g = m.cell, grads.cell
        A = trace.gates
        C = trace.C
        DZ = np.empty((B, steps, 4 * K))
        Wr = p.W_rec
        dh_next = np.zeros((B, K))
        dc_next = np.zeros((B, K))
        for t in range(steps - 1, -1, -1):
            a = A[:, t]
            f, i, o, gg = a[:, :K], a[:, K : 2 * K], a[:, 2 * K : 3 * K], a[:, 3 * K :]
            c = C[:, t + 1]
            tc = np.tanh(c)
            dh = dH[:, t + 1] + dh_next
            dc = dc_next + dh * o * (1.0 - tc**2)
            dz = DZ[:, t]
            dz[:, :K] = dc * C[:, t] * f * (1.0 - f)
            dz[:, K : 2 * K] = dc * gg * i * (1.0 - i)
            dz[:, 2 * K : 3 * K] = dh * tc * o * (1.0 - o)
            dz[:, 3 * K :] = dc * i * (1.0 - gg**2)
            dc_next = dc * f
            dh_next = dz @ Wr
        flat = DZ.reshape(-1, 4 * K)
        g.W_rec += flat.T @ H_prev.reshape(-1, K)
        g.W_in += flat.T @ trace.X.reshape(-1, trace.X.shape[-1])
        g.b += flat.sum(axis=0)
        dX = DZ @ p.W_in
    if trace.input_mask is not None:
        dX = dX * trace.input_mask[:, :steps]
    dE_T = np.zeros((m.N, m.D))
    np.add.at(dE_T, trace.ids[:, :steps].reshape(-1), dX.reshape(-1, m.D))
    grads.embedding += dE_T.T


# --------------------------------------------------------------------------
# serialization
#
# Layout (all integers little-endian uint32, floats little-endian float64):
#   magic   8 bytes  b"CODELM\x00\x01"
#   version          1
#   kind             0 = rnn, 1 = lstm
#   N, D, K
#   flags            bit 0 set when an optimizer-state block follows
#   vocab hash       32 bytes (SHA-256 of the id-ordered token list)
#   parameter blocks in ModelParameters.named_arrays() order, row-major:
#     embedding (D*N), cell arrays, U (N*K), nce_offset (1)
#       rnn cell:  b (K), W_tran (K*K), W_in (K*D)
#       lstm cell: W_in (4K*D), W_rec (4K*K), b (4K); gate rows ordered
#                  forget, input, output, candidate
#   optional optimizer block: one accumulator per parameter, same order

MAGIC = b"CODELM\x00\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII32s")


class ModelFormatError(ValueError):
    pass


def _shapes(kind: str, N: int, D: int, K: int):
    cell = (
        [(K,), (K, K), (K, D)] if kind == "rnn" else [(4 * K, D), (4 * K, K), (4 * K,)]
    )
    return [(D, N)] + cell + [(N, K), (1,)]


def _from_arrays(kind: str, arrs: list[np.ndarray]) -> ModelParameters:
    cell = RnnParameters(*arrs[1:4]) if kind == "rnn" else LstmParameters(*arrs[1:4])
    return ModelParameters(kind, arrs[0], cell, arrs[4], arrs[5])


def dump_model(m: ModelParameters, vocab_hash: bytes, optimizer_state: dict | None = None) -> bytes:
    if len(vocab_hash) != 32:
        raise ValueError("vocab hash must be 32 bytes")
    flags = 1 if optimizer_state is not None else 0
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, KINDS.index(m.kind), m.N, m.D, m.K, flags, vocab_hash)]
    for _, a in m.named_arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    if optimizer_state is not None:
        for name, _ in m.named_arrays():
            parts.append(np.ascontiguousarray(optimizer_state[name], dtype="<f8").tobytes())
    return b"".join(parts)


def parse_model(data: bytes, expected_vocab_hash: bytes | None = None):
    """Inverse of :func:`dump_model`; returns ``(params, vocab_hash, optimizer_state)``."""
    if len(data) < _HEADER.size:
        raise ModelFormatError("file too short for a model header")
    magic, version, kind_i, N, D, K, flags, vhash = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a codelm model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if kind_i >= len(KINDS):
        raise ModelFormatError(f"bad model kind {kind_i}")
    if expected_vocab_hash is not None and vhash != expected_vocab_hash:
        raise ModelFormatError("model was trained on a different vocabulary")
    kind = KINDS[kind_i]
    shapes = _shapes(kind, N, D, K)
    need = sum(int(np.prod(s)) for s in shapes) * 8 * (2 if flags & 1 else 1)
    if len(data) != _HEADER.size + need:
        raise ModelFormatError(f"expected {_HEADER.size + need} bytes, got {len(data)}")
    off = _HEADER.size

    def read_blocks():
        nonlocal off
        out = []
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(s))
            off += n * 8
        return out

    params = _from_arrays(kind, read_blocks())
    opt = None
    if flags & 1:
        names = [n for n, _ in params.named_arrays()]
        opt = dict(zip(names, read_blocks()))
    return params, vhash, opt


def save_model(path, m: ModelParameters, vocab_hash: bytes, optimizer_state: dict | None = None) -> None:
    Path(path).write_bytes(dump_model(m, vocab_hash, optimizer_state))


def load_model(path, expected_vocab_hash: bytes | None = None):
    return parse_model(Path(path).read_bytes(), expected_vocab_hash)
