"""Linear-chain CRF over the four anomaly labels.

Features are binary indicators from two templates:

* ``TRANS(prev, label)`` for every label pair, plus ``TRANS(START, label)``
  for the first position;
* ``EMIT(label, channel, code)`` for every (channel, code) pair seen in the
  training data, crossed with all four labels.

The score of a label sequence is the sum of the weights of its active
features; probabilities are obtained by normalizing over all label
sequences.  Two trainers are provided: batch L-BFGS on the L2-regularized
negative log-likelihood and an online, confidence-weighted (AROW) update on
Viterbi mistakes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import lbfgs
from .episode import AnomalyClass, Episode, Observation
from .features import CHANNEL_CARDINALITY, CHANNEL_NAMES, FeaturizerStats, discretize_sequence

log = logging.getLogger(__name__)

LABELS = tuple(AnomalyClass)
N_LABELS = len(LABELS)
START = "START"
N_CHANNELS = len(CHANNEL_NAMES)


def _identity_key(identity: tuple) -> str:
    return "|".join(str(part) for part in identity)


def _parse_identity(key: str) -> tuple:
    parts = key.split("|")
    if parts[0] == "TRANS" and len(parts) == 3:
        return ("TRANS", parts[1], parts[2])
    if parts[0] == "EMIT" and len(parts) == 4:
        return ("EMIT", parts[1], parts[2], int(parts[3]))
    raise ValueError(f"unrecognized feature identity {key!r}")


class CrfFeatureIndex:
    """Dense numbering of feature identities, with array lookups for inference."""

    def __init__(self, features: Sequence[tuple]):
        self.features = tuple(features)
        self.position = {f: i for i, f in enumerate(self.features)}
        if len(self.position) != len(self.features):
            raise ValueError("duplicate feature identities")
        label_pos = {label.name: i for i, label in enumerate(LABELS)}
        self.start_idx = np.full(N_LABELS, -1, dtype=np.int64)
        self.trans_idx = np.full((N_LABELS, N_LABELS), -1, dtype=np.int64)
        self.emit_idx = [np.full((card, N_LABELS), -1, dtype=np.int64) for card in CHANNEL_CARDINALITY]
        for i, f in enumerate(self.features):
            if f[0] == "TRANS":
                _, prev, cur = f
                if prev == START:
                    self.start_idx[label_pos[cur]] = i
                else:
                    self.trans_idx[label_pos[prev], label_pos[cur]] = i
            else:
                _, label, channel, code = f
                self.emit_idx[CHANNEL_NAMES.index(channel)][code, label_pos[label]] = i
        if (self.start_idx < 0).any() or (self.trans_idx < 0).any():
            raise ValueError("feature index must contain every TRANS feature")

    def __len__(self) -> int:
        return len(self.features)

    def __eq__(self, other) -> bool:
        return isinstance(other, CrfFeatureIndex) and self.features == other.features

    @classmethod
    def build(cls, code_arrays: Sequence[np.ndarray]) -> "CrfFeatureIndex":
        """Index from training data; identities are sorted, so input order is irrelevant."""
        seen = set()
        for codes in code_arrays:
            for ch in range(N_CHANNELS):
                seen.update((ch, int(c)) for c in np.unique(codes[:, ch]))
        features = [("TRANS", START, y.name) for y in LABELS]
        features += [("TRANS", p.name, y.name) for p in LABELS for y in LABELS]
        features += [("EMIT", y.name, CHANNEL_NAMES[ch], code) for ch, code in sorted(seen) for y in LABELS]
        return cls(features)

    def compile(self, codes: np.ndarray) -> np.ndarray:
        """(n, 7, 4) weight indices of the EMIT features active per label; -1 = absent."""
        codes = np.asarray(codes)
        out = np.empty((codes.shape[0], N_CHANNELS, N_LABELS), dtype=np.int64)
        for ch in range(N_CHANNELS):
            out[:, ch, :] = self.emit_idx[ch][codes[:, ch]]
        return out

    def to_list(self) -> list[str]:
        return [_identity_key(f) for f in self.features]

    @classmethod
    def from_list(cls, keys: Sequence[str]) -> "CrfFeatureIndex":
        return cls([_parse_identity(k) for k in keys])


@dataclass(frozen=True, eq=False)
class CrfModel:
    index: CrfFeatureIndex
    weights: np.ndarray
    stats: Optional[FeaturizerStats] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights.shape != (len(self.index),):
            raise ValueError("weight vector length must equal the feature count")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("CRF weights must be finite")

    def label_sequence(self, observations: Sequence[Observation]) -> list[AnomalyClass]:
        return [LABELS[i] for i in decode(self, discretize_sequence(observations, self.stats))]

    def to_dict(self) -> dict:
        return {"features": self.index.to_list(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict, stats: FeaturizerStats) -> "CrfModel":
        return cls(CrfFeatureIndex.from_list(d["features"]), np.array(d["weights"], dtype=float), stats)


# --- potentials and inference ----------------------------------------------


def _gather(weights: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.where(idx >= 0, weights[np.maximum(idx, 0)], 0.0)


def potentials(index: CrfFeatureIndex, weights: np.ndarray, emit_idx: np.ndarray):
    """Log potentials (start (4,), trans (4, 4), emit (n, 4)) for a compiled sequence."""
    start = weights[index.start_idx]
    trans = weights[index.trans_idx]
    emit = _gather(weights, emit_idx).sum(axis=1)
    return start, trans, emit


def score_position(model: CrfModel, prev_label, label, x: Sequence[int]) -> float:
    """Sum of active feature weights at one position; ``prev_label=None`` means START."""
    w, idx = model.weights, model.index
    label = int(label)
    score = w[idx.start_idx[label]] if prev_label is None else w[idx.trans_idx[int(prev_label), label]]
    for ch, code in enumerate(x):
        j = idx.emit_idx[ch][code, label] if 0 <= code < CHANNEL_CARDINALITY[ch] else -1
        if j >= 0:
            score += w[j]
    return float(score)


def sequence_score(model: CrfModel, codes: np.ndarray, labels: Sequence[int]) -> float:
    labels = [int(y) for y in labels]
    total = 0.0
    prev = None
    for t, y in enumerate(labels):
        total += score_position(model, prev, y, codes[t])
        prev = y
    return total


def _log_partition(start, trans, emit) -> float:
    alpha = start + emit[0]
    for t in range(1, emit.shape[0]):
        m = alpha.max()
        alpha = m + np.log(np.exp(alpha - m) @ np.exp(trans)) + emit[t]
    m = alpha.max()
    return float(m + np.log(np.exp(alpha - m).sum()))


def log_partition(model: CrfModel, codes: np.ndarray) -> float:
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        raise ValueError("empty observation sequence")
    return _log_partition(*potentials(model.index, model.weights, model.index.compile(codes)))


def _forward_backward(start, trans, emit):
    """Scaled forward-backward; returns (log Z, node marginals (n, 4), summed pair marginals (4, 4))."""
    n = emit.shape[0]
    shift = emit.max(axis=1, keepdims=True)
    phi = np.exp(emit - shift)
    tshift = trans.max()
    psi = np.exp(trans - tshift)
    s0 = start.max()
    alpha = np.empty((n, N_LABELS))
    scale = np.empty(n)
    a = np.exp(start - s0) * phi[0]
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for t in range(1, n):
        a = (alpha[t - 1] @ psi) * phi[t]
        scale[t] = a.sum()
        alpha[t] = a / scale[t]
    beta = np.empty((n, N_LABELS))
    beta[-1] = 1.0
    for t in range(n - 2, -1, -1):
        beta[t] = psi @ (phi[t + 1] * beta[t + 1]) / scale[t + 1]
    log_z = float(np.log(scale).sum() + shift.sum() + s0 + (n - 1) * tshift)
    node = alpha * beta
    if n > 1:
        # pair[t, i, j] = alpha[t, i] psi[i, j] phi[t+1, j] beta[t+1, j] / scale[t+1]
        right = phi[1:] * beta[1:] / scale[1:, None]
        pair = (alpha[:-1].T @ right) * psi
    else:
        pair = np.zeros((N_LABELS, N_LABELS))
    return log_z, node, pair


@dataclass
class _Compiled:
    emit_idx: np.ndarray  # (n, 7, 4)
    labels: np.ndarray  # (n,)
    empirical: np.ndarray  # feature counts of the gold labeling


def feature_counts(index: CrfFeatureIndex, emit_idx: np.ndarray, labels: np.ndarray) -> np.ndarray:
    counts = np.zeros(len(index))
    labels = np.asarray(labels)
    counts[index.start_idx[labels[0]]] += 1.0
    np.add.at(counts, index.trans_idx[labels[:-1], labels[1:]], 1.0)
    active = emit_idx[np.arange(len(labels)), :, labels].ravel()
    active = active[active >= 0]
    counts += np.bincount(active, minlength=len(index))
    return counts


def _compile(index: CrfFeatureIndex, codes: np.ndarray, labels) -> _Compiled:
    labels = np.asarray([int(y) for y in labels], dtype=np.int64)
    emit_idx = index.compile(codes)
    return _Compiled(emit_idx, labels, feature_counts(index, emit_idx, labels))


def _nll_grad_compiled(index: CrfFeatureIndex, weights: np.ndarray, batch: Sequence[_Compiled], l2: float):
    nll = 0.5 * l2 * float(weights @ weights)
    grad = l2 * weights
    expected = np.zeros(len(index))
    for seq in batch:
        start, trans, emit = potentials(index, weights, seq.emit_idx)
        log_z, node, pair = _forward_backward(start, trans, emit)
        gold = float(seq.empirical @ weights)
        nll += log_z - gold
        expected[index.start_idx] += node[0]
        expected[index.trans_idx.ravel()] += pair.ravel()
        flat = seq.emit_idx.ravel()
        mass = np.broadcast_to(node[:, None, :], seq.emit_idx.shape).ravel()
        ok = flat >= 0
        expected += np.bincount(flat[ok], weights=mass[ok], minlength=len(index))
        grad = grad - seq.empirical
    grad = grad + expected
    if not np.isfinite(nll) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite CRF objective (diverged weights?)")
    return nll, grad


def nll_and_gradient(model: CrfModel, batch: Sequence[tuple[np.ndarray, Sequence[int]]], l2: float = 0.0):
    """Regularized negative log-likelihood of (codes, labels) pairs and its gradient."""
    if not batch:
        raise ValueError("empty batch")
    compiled = [_compile(model.index, codes, labels) for codes, labels in batch]
    return _nll_grad_compiled(model.index, model.weights, compiled, l2)


def _viterbi(start, trans, emit) -> np.ndarray:
    n = emit.shape[0]
    v = start + emit[0]
    back = np.zeros((n, N_LABELS), dtype=np.int64)
    cols = np.arange(N_LABELS)
    for t in range(1, n):
        cand = v[:, None] + trans
        back[t] = np.argmax(cand, axis=0)  # first maximum -> lowest label index
        v = cand[back[t], cols] + emit[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(v))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def decode(model: CrfModel, codes: np.ndarray) -> np.ndarray:
    """Highest-scoring label indices (0=SAFE, 1=LOC, 2=DIS, 3=UNB)."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        raise ValueError("empty observation sequence")
    return _viterbi(*potentials(model.index, model.weights, model.index.compile(codes)))


# --- training ----------------------------------------------------------------


@dataclass
class LbfgsConfig:
    max_iters: int = 200
    memory: int = 10
    l2: float = 1e-2
    c1: float = 1e-4
    c2: float = 0.9
    grad_tol: float = 1e-3


@dataclass
class ArowConfig:
    r: float = 1.0
    epochs: int = 10
    shuffle_seed: int = 0


def _prepare(train: Sequence[Episode], stats: FeaturizerStats):
    if not train:
        raise ValueError("empty training set")
    codes = [discretize_sequence(ep.observations, stats) for ep in train]
    index = CrfFeatureIndex.build(codes)
    compiled = [_compile(index, c, ep.labels) for c, ep in zip(codes, train)]
    return index, compiled


def train_lbfgs(train: Sequence[Episode], stats: FeaturizerStats, config: LbfgsConfig = LbfgsConfig()) -> CrfModel:
    index, compiled = _prepare(train, stats)

    def objective(w):
        return _nll_grad_compiled(index, w, compiled, config.l2)

    result = lbfgs.minimize(
        objective, np.zeros(len(index)), memory=config.memory, max_iters=config.max_iters,
        grad_tol=config.grad_tol, c1=config.c1, c2=config.c2,
    )
    if result.line_search_failed:
        log.warning("L-BFGS line search failed after %d iterations; keeping best weights", result.iterations)
    info = {
        "iterations": result.iterations,
        "converged": result.converged,
        "line_search_failed": result.line_search_failed,
        "objective_history": result.history,
    }
    return CrfModel(index, result.x, stats, info)


def arow_update(weights, variance, delta, r):
    """One diagonal AROW step toward margin 1 on the feature difference ``delta``.

    Returns updated (weights, variance); both are new arrays.
    """
    margin = float(weights @ delta)
    loss = 1.0 - margin
    if loss <= 0:
        return weights, variance
    sd = variance * delta
    beta = 1.0 / (float(delta @ sd) + r)
    alpha = loss * beta
    return weights + alpha * sd, variance - beta * sd * sd


def train_arow(train: Sequence[Episode], stats: FeaturizerStats, config: ArowConfig = ArowConfig()) -> CrfModel:
    if config.r <= 0:
        raise ValueError("AROW regularization r must be positive")
    index, compiled = _prepare(train, stats)
    weights = np.zeros(len(index))
    variance = np.ones(len(index))
    rng = np.random.default_rng(config.shuffle_seed)
    accuracy = []
    for _ in range(config.epochs):
        correct = 0
        for i in rng.permutation(len(compiled)):
            seq = compiled[i]
            pred = _viterbi(*potentials(index, weights, seq.emit_idx))
            if np.array_equal(pred, seq.labels):
                correct += 1
                continue
            delta = seq.empirical - feature_counts(index, seq.emit_idx, pred)
            weights, variance = arow_update(weights, variance, delta, config.r)
        accuracy.append(correct / len(compiled))
    return CrfModel(index, weights, stats, {"epoch_sequence_accuracy": accuracy, "variance": variance})
