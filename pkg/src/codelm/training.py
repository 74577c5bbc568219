"""Objectives, gradients and the RMSprop training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .corpus import CorpusPartition, as_id_matrix
from .model import (
    BatchTrace,
    Gradients,
    ModelParameters,
    backprop_states,
    init_parameters,
    run_batch,
    sequence_log_prob,
)
from .numerics import SeededRng, finite_difference_gradient, log_softmax, sample_categorical, sigmoid

log = logging.getLogger(__name__)

# RMSprop settings reported as best for each model kind
PAPER_RMSPROP = {
    "rnn": {"learning_rate": 0.01, "adaptation_rate": 0.9, "smoothing": 1e-8},
    "lstm": {"learning_rate": 0.02, "adaptation_rate": 0.99, "smoothing": 1e-7},
}


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    adaptation_rate: float = 0.9
    smoothing: float = 1e-8
    nce_k: int | None = None
    dropout_rate: float = 0.5
    clip_norm: float = 5.0
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    embed_dim: int = 50
    hidden_dim: int | None = None  # defaults to embed_dim

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.adaptation_rate < 1:
            raise ValueError("adaptation_rate must lie in (0, 1)")
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")
        if self.nce_k is not None and self.nce_k < 1:
            raise ValueError("nce_k must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if self.embed_dim < 1 or (self.hidden_dim is not None and self.hidden_dim < 1):
            raise ValueError("dimensions must be >= 1")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TrainingConfig":
        """Config carrying the tuned RMSprop triple for ``kind``, then ``overrides``."""
        return cls(**{**PAPER_RMSPROP[kind], **overrides})

    @property
    def K(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.embed_dim

    @property
    def objective(self) -> str:
        return "softmax" if self.nce_k is None else "nce"

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# dropout


@dataclass
class DropoutMasks:
    """Inverted-dropout multipliers (0 or ``1/(1-rate)``) for the two dropout sites."""

    input: np.ndarray | None = None  # (B, T, D) on embedded inputs
    output: np.ndarray | None = None  # (B, T, K) on states fed to the output layer


def dropout_mask(shape, rate: float, rng: SeededRng) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(v, rate: float, rng: SeededRng, training: bool) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not training or rate == 0:
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        return v.copy()
    return v * dropout_mask(v.shape, rate, rng)


def sample_masks(shape_bt: tuple[int, int], m: ModelParameters, rate: float, rng: SeededRng) -> DropoutMasks | None:
    if rate == 0:
        return None
    B, T = shape_bt
    return DropoutMasks(dropout_mask((B, T, m.D), rate, rng), dropout_mask((B, T, m.K), rate, rng))


# --------------------------------------------------------------------------
# full-softmax objective


def log_loss(sentence, m: ModelParameters) -> float:
    return -sequence_log_prob(sentence, m)


def _trace(m: ModelParameters, ids: np.ndarray, masks: DropoutMasks | None) -> BatchTrace:
    if masks is None:
        return run_batch(m, ids)
    return run_batch(m, ids, masks.input, masks.output)


def softmax_loss_and_gradients(ids, m: ModelParameters, masks: DropoutMasks | None = None) -> tuple[float, Gradients]:
    """Summed log-loss of every sentence in ``ids`` and its exact gradient."""
    ids = as_id_matrix(ids)
    trace = _trace(m, ids, masks)
    logits = trace.H @ m.U.T  # (B, T, N)
    logp = log_softmax(logits)
    tgt = ids[..., None]
    loss = -float(np.take_along_axis(logp, tgt, axis=-1).sum())
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt, np.take_along_axis(dlogits, tgt, axis=-1) - 1.0, axis=-1)
    grads = m.zeros_like()
    K = m.K
    grads.U += dlogits.reshape(-1, m.N).T @ trace.H.reshape(-1, K)
    dH = dlogits @ m.U
    backprop_states(m, trace, dH, grads)
    return loss, grads


def bptt_gradients(sentence, m: ModelParameters, masks: DropoutMasks | None = None) -> Gradients:
    """Exact gradient of :func:`log_loss` for one sentence by backpropagation through time."""
    return softmax_loss_and_gradients(sentence, m, masks)[1]


# --------------------------------------------------------------------------
# noise contrastive estimation


@dataclass
class NoiseDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p <= 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("noise distribution must be strictly positive and sum to 1")
        self.probs = p

    @classmethod
    def from_counts(cls, ids, N: int) -> "NoiseDistribution":
        """Unigram over ``ids`` with add-one smoothing."""
        counts = np.bincount(np.asarray(ids).reshape(-1), minlength=N).astype(float) + 1.0
        return cls(counts / counts.sum())

    def sample(self, rng: SeededRng, size) -> np.ndarray:
        return sample_categorical(self.probs, rng, size)


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class NceStep:
    loss: float
    dU: np.ndarray  # (N, K); rows outside target + noise are zero
    d_offset: float
    dh: np.ndarray
    noise_ids: np.ndarray


def nce_objective_and_gradients(h, target: int, m: ModelParameters, noise: NoiseDistribution, k: int,
                                rng: SeededRng | None = None, noise_ids=None) -> NceStep:
    """NCE binary-classification loss for one (state, target) pair.

    A word's score is ``s(w) = U_w . h + offset`` and its posterior of being
    data rather than noise is ``exp(s) / (exp(s) + k q(w))``.  Pass
    ``noise_ids`` to freeze the noise draw; otherwise ``k`` ids are drawn
    from ``noise`` with ``rng``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h = np.asarray(h, dtype=float)
    if noise_ids is None:
        noise_ids = noise.sample(rng, k)
    noise_ids = np.asarray(noise_ids, dtype=np.int64)
    logkq = np.log(k * noise.probs)
    off = float(m.nce_offset[0])
    d_t = m.U[target] @ h + off - logkq[target]
    d_n = m.U[noise_ids] @ h + off - logkq[noise_ids]
    loss = float(_softplus(-d_t) + _softplus(d_n).sum())
    g_t = sigmoid(d_t) - 1.0
    g_n = sigmoid(d_n)
    dU = np.zeros_like(m.U)
    dU[target] += g_t * h
    np.add.at(dU, noise_ids, g_n[:, None] * h[None, :])
    dh = g_t * m.U[target] + g_n @ m.U[noise_ids]
    return NceStep(loss, dU, float(g_t + g_n.sum()), dh, noise_ids)


def nce_loss_and_gradients(ids, m: ModelParameters, noise: NoiseDistribution, k: int, *,
                           rng: SeededRng | None = None, noise_ids=None,
                           masks: DropoutMasks | None = None) -> tuple[float, Gradients]:
    """NCE loss summed over every position of every sentence, with gradients.

    One set of ``k`` noise ids is drawn per time position and shared across
    the batch rows (``noise_ids`` shape ``(T, k)``), so the cost per step is
    independent of the vocabulary size.
    """
    ids = as_id_matrix(ids)
    B, T = ids.shape
    if noise_ids is None:
        noise_ids = noise.sample(rng, (T, k))
    noise_ids = np.asarray(noise_ids, dtype=np.int64).reshape(T, k)
    trace = _trace(m, ids, masks)
    H = trace.H
    logkq = np.log(k * noise.probs)
    off = float(m.nce_offset[0])
    U_t = m.U[ids]  # (B, T, K)
    d_t = np.einsum("btk,btk->bt", U_t, H) + off - logkq[ids]
    U_n = m.U[noise_ids]  # (T, k, K)
    d_n = np.einsum("btk,tjk->btj", H, U_n) + off - logkq[noise_ids][None]
    loss = float(_softplus(-d_t).sum() + _softplus(d_n).sum())
    g_t = sigmoid(d_t) - 1.0
    g_n = sigmoid(d_n)
    grads = m.zeros_like()
    K = m.K
    np.add.at(grads.U, ids.reshape(-1), (g_t[..., None] * H).reshape(-1, K))
    np.add.at(grads.U, noise_ids.reshape(-1), np.einsum("btj,btk->tjk", g_n, H).reshape(-1, K))
    grads.nce_offset += g_t.sum() + g_n.sum()
    dH = g_t[..., None] * U_t + np.einsum("btj,tjk->btk", g_n, U_n)
    backprop_states(m, trace, dH, grads)
    return loss, grads


# --------------------------------------------------------------------------
# clipping and RMSprop


def global_norm(g: Gradients) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for _, a in g.named_arrays()))


def clip_gradients(g: Gradients, max_norm: float) -> Gradients:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(g)
    if norm <= max_norm:
        return g
    scale = max_norm / norm
    return g.map(lambda a: a * scale)


def init_rmsprop_state(m: ModelParameters) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in m.named_arrays()}


def rmsprop_update(m: ModelParameters, g: Gradients, state: dict[str, np.ndarray], cfg: TrainingConfig):
    """In place: ``acc = rho*acc + (1-rho)*g^2``; ``theta -= eta*g/sqrt(acc + eps)``."""
    rho, eta, eps = cfg.adaptation_rate, cfg.learning_rate, cfg.smoothing
    grads = g.arrays()
    for name, p in m.named_arrays():
        gi = grads[name]
        acc = state[name]
        acc *= rho
        acc += (1.0 - rho) * gi * gi
        p -= eta * gi / np.sqrt(acc + eps)
    return m, state


# --------------------------------------------------------------------------
# early stopping and the loop


@dataclass
class EarlyStopping:
    patience: int
    best_validation_perplexity: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    snapshot: ModelParameters | None = None

    def update(self, epoch: int, valid_ppl: float, m: ModelParameters) -> bool:
        """Record one epoch's validation score; True means stop now."""
        if valid_ppl < self.best_validation_perplexity:
            self.best_validation_perplexity = valid_ppl
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.snapshot = m.copy()
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean per token
    valid_ppl: float
    seconds: float
    checksum: str

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.valid_ppl:.6f}\t{self.seconds:.2f}"


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[EpochRecord]
    best_epoch: int
    stopped_early: bool
    optimizer_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def log_tsv(self) -> str:
        return "".join(r.tsv() + "\n" for r in self.log)


class TrainingDiverged(FloatingPointError):
    pass


def batch_loss_and_gradients(ids, m: ModelParameters, cfg: TrainingConfig, rng: SeededRng,
                             noise: NoiseDistribution | None):
    masks = sample_masks(ids.shape, m, cfg.dropout_rate, rng)
    if cfg.nce_k is None:
        return softmax_loss_and_gradients(ids, m, masks)
    return nce_loss_and_gradients(ids, m, noise, cfg.nce_k, rng=rng, masks=masks)


def train(partition: CorpusPartition, cfg: TrainingConfig, kind: str, *,
          init: ModelParameters | None = None,
          validation_fn: Callable[[ModelParameters, int], float] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Mini-batch RMSprop with per-epoch validation and early stopping.

    Returns the parameters from the epoch with the lowest validation
    perplexity.  ``validation_fn(params, epoch)`` replaces the built-in
    validation perplexity when given.
    """
    from .evaluation import perplexity

    train_ids = as_id_matrix(partition.train)
    N = len(partition.vocab)
    root = SeededRng(cfg.seed)
    m = init if init is not None else init_parameters(kind, N, cfg.embed_dim, cfg.K, root.spawn(0))
    if m.kind != kind:
        raise ValueError(f"initial parameters are {m.kind}, asked to train {kind}")
    order_rng = root.spawn(1)
    noise_rng = root.spawn(2)
    noise = NoiseDistribution.from_counts(train_ids, N) if cfg.nce_k is not None else None
    state = init_rmsprop_state(m)
    stopper = EarlyStopping(cfg.patience)
    records: list[EpochRecord] = []
    S, L = train_ids.shape
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(S)
        total = 0.0
        for b, start in enumerate(range(0, S, cfg.batch_size)):
            batch = train_ids[order[start : start + cfg.batch_size]]
            loss, g = batch_loss_and_gradients(batch, m, cfg, noise_rng, noise)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            total += loss
            g = clip_gradients(g.map(lambda a: a / len(batch)), cfg.clip_norm)
            rmsprop_update(m, g, state, cfg)
        if validation_fn is not None:
            vppl = float(validation_fn(m, epoch))
        else:
            vppl = perplexity(partition.valid, m).perplexity
        if not math.isfinite(vppl):
            raise TrainingDiverged(f"non-finite validation perplexity after epoch {epoch}")
        rec = EpochRecord(epoch, total / (S * L), vppl, time.perf_counter() - t0, m.checksum())
        records.append(rec)
        log.info("epoch %d train loss/token %.4f valid ppl %.4f", epoch, rec.train_loss, vppl)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(epoch, vppl, m):
            stopped = True
            break
    return TrainResult(stopper.snapshot, records, stopper.best_epoch, stopped, state)


# --------------------------------------------------------------------------
# gradient checking


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradientCheckReport:
    kind: str
    max_relative_error: float
    worst: tuple[str, tuple[int, ...]]
    coordinates: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def compare_gradients(loss_fn: Callable[[ModelParameters], float], m: ModelParameters, analytic: Gradients,
                      h: float = 1e-5) -> tuple[float, tuple[str, tuple[int, ...]], int]:
    """Central differences of ``loss_fn`` against ``analytic`` over every coordinate."""
    worst_err, worst_at, count = -1.0, ("", ()), 0
    ana = analytic.arrays()
    for name, arr in m.named_arrays():
        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x
            try:
                return loss_fn(m)
            finally:
                arr[...] = saved
        num = finite_difference_gradient(f, arr, h)
        err = relative_error(ana[name], num)
        count += err.size
        i = int(np.argmax(err))
        if err.flat[i] > worst_err:
            worst_err = float(err.flat[i])
            worst_at = (name, tuple(int(v) for v in np.unravel_index(i, arr.shape)))
    return worst_err, worst_at, count


def random_check_model(kind: str, N: int, D: int, K: int, seed: int) -> ModelParameters:
    """Model with weights large enough that no gradient is buried in rounding noise."""
    rng = SeededRng(seed)
    m = init_parameters(kind, N, D, K, rng, scale=0.5)
    m.cell.b[:] = rng.uniform(-0.5, 0.5, m.cell.b.shape)
    return m


def gradient_check(kind: str, dims: tuple[int, int, int] = (7, 5, 12), seed: int = 0, *,
                   tolerance: float = 1e-4, step: float = 1e-4, gradient_fn=None) -> GradientCheckReport:
    """Check :func:`bptt_gradients` against finite differences on a random model.

    ``dims`` is ``(N, D, length)`` with ``K = D``.  ``gradient_fn`` replaces
    the analytic gradient, which is how fault injection is tested.  The
    difference step is 1e-4: at 1e-5 rounding in the loss swamps the
    smallest recurrent-weight gradients (~1e-6).
    """
    N, D, length = dims
    m = random_check_model(kind, N, D, D, seed)
    sentence = SeededRng(seed + 1).integers(0, N, length)
    grad_fn = gradient_fn or bptt_gradients
    analytic = grad_fn(sentence, m)
    err, worst, count = compare_gradients(lambda mm: log_loss(sentence, mm), m, analytic, step)
    return GradientCheckReport(kind, err, worst, count, tolerance)
