"""Single-layer LSTM with a per-step softmax head over the four labels.

Gate equations per step, with ``h`` the previous hidden vector and ``x`` the
43-wide feature vector::

    f  = sigmoid(W_f h + U_f x + b_f)
    i  = sigmoid(W_i h + U_i x + b_i)
    c~ = tanh(W_c h + U_c x + b_c)
    c  = f * c_prev + i * c~
    o  = sigmoid(W_o h + U_o x + b_o)
    h  = o * tanh(c)

The four gates are stored stacked in the order f, i, c~, o so one matrix
product per step serves all of them.  Training minimizes the mean per-step
cross-entropy with Adam on one episode at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .episode import AnomalyClass, Episode, Observation
from .features import FEATURE_WIDTH, FeaturizerStats, encode_sequence

log = logging.getLogger(__name__)

N_CLASSES = len(AnomalyClass)
GATES = ("f", "i", "c", "o")
PARAM_NAMES = ("W", "U", "b", "V", "d")


class LstmDivergenceError(FloatingPointError):
    """Raised when the loss or activations stop being finite."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


def _sigmoid(z):
    return expit(z)


@dataclass(frozen=True, eq=False)
class LstmParams:
    """Stacked weights: ``W`` (4H, H), ``U`` (4H, D), ``b`` (4H,), head ``V`` (4, H), ``d`` (4,)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    V: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        h = self.W.shape[1]
        expected = {"W": (4 * h, h), "b": (4 * h,), "V": (N_CLASSES, h), "d": (N_CLASSES,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.U.ndim != 2 or self.U.shape[0] != 4 * h:
            raise ValueError(f"U has shape {self.U.shape}, expected (4H, input)")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[1]

    @property
    def input_size(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W_g, U_g, b_g) views for gate ``name`` in {"f", "i", "c", "o"}."""
        k = GATES.index(name)
        s = slice(k * self.hidden_size, (k + 1) * self.hidden_size)
        return self.W[s], self.U[s], self.b[s]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in PARAM_NAMES)

    @classmethod
    def zeros(cls, hidden_size: int = 64, input_size: int = FEATURE_WIDTH) -> "LstmParams":
        h = hidden_size
        return cls(np.zeros((4 * h, h)), np.zeros((4 * h, input_size)), np.zeros(4 * h),
                   np.zeros((N_CLASSES, h)), np.zeros(N_CLASSES))

    @classmethod
    def init(cls, hidden_size: int = 64, input_size: int = FEATURE_WIDTH, seed: int = 0,
             forget_bias: float = 1.0) -> "LstmParams":
        """Uniform in [-1/sqrt(H), 1/sqrt(H)] with the forget-gate bias shifted by ``forget_bias``."""
        if hidden_size < 1:
            raise ValueError("hidden_size must be positive")
        rng = np.random.default_rng([seed, 0])
        k = 1.0 / np.sqrt(hidden_size)
        h = hidden_size
        W = rng.uniform(-k, k, (4 * h, h))
        U = rng.uniform(-k, k, (4 * h, input_size))
        b = rng.uniform(-k, k, 4 * h)
        b[:h] += forget_bias
        V = rng.uniform(-k, k, (N_CLASSES, h))
        d = rng.uniform(-k, k, N_CLASSES)
        return cls(W, U, b, V, d)

    def to_dict(self) -> dict:
        return {n: getattr(self, n).tolist() for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "LstmParams":
        return cls(*(np.array(d[n], dtype=float) for n in PARAM_NAMES))


@dataclass(frozen=True)
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int) -> "LstmState":
        return cls(np.zeros(hidden_size), np.zeros(hidden_size))


@dataclass(frozen=True)
class GateRecord:
    f: np.ndarray
    i: np.ndarray
    c_tilde: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray


def lstm_step(params: LstmParams, state: LstmState, x: np.ndarray) -> tuple[LstmState, GateRecord]:
    """One recurrence step; reference form of the loop inside ``forward_sequence``."""
    H = params.hidden_size
    z = params.W @ state.h + params.U @ x + params.b
    f = _sigmoid(z[:H])
    i = _sigmoid(z[H:2 * H])
    g = np.tanh(z[2 * H:3 * H])
    o = _sigmoid(z[3 * H:])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise LstmDivergenceError("non-finite LSTM state")
    return LstmState(c, h), GateRecord(f, i, g, o, state.c, state.h)


@dataclass
class SequenceCache:
    x: np.ndarray  # (n, D)
    gates: np.ndarray  # (n, 4H) post-activation f, i, c~, o
    c: np.ndarray  # (n + 1, H), row 0 is the initial state
    h: np.ndarray  # (n + 1, H)
    log_probs: np.ndarray  # (n, 4)


def forward_sequence(params: LstmParams, xs: np.ndarray) -> tuple[np.ndarray, SequenceCache]:
    """Per-step class log-probabilities, shape (n, 4), plus activations for BPTT."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("forward_sequence needs a non-empty (n, input) array")
    n, H = xs.shape[0], params.hidden_size
    pre = xs @ params.U.T + params.b
    gates = np.empty((n, 4 * H))
    c = np.zeros((n + 1, H))
    h = np.zeros((n + 1, H))
    W = params.W
    f_, i_, g_, o_ = slice(0, H), slice(H, 2 * H), slice(2 * H, 3 * H), slice(3 * H, 4 * H)
    # in-place ops: the per-step cost is dominated by numpy call overhead
    for t in range(n):
        z = W @ h[t]
        z += pre[t]
        a = gates[t]
        expit(z, out=a)
        np.tanh(z[g_], out=a[g_])
        ct = c[t + 1]
        np.multiply(a[f_], c[t], out=ct)
        ct += a[i_] * a[g_]
        ht = h[t + 1]
        np.tanh(ct, out=ht)
        ht *= a[o_]
    logits = h[1:] @ params.V.T + params.d
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if not np.all(np.isfinite(log_probs)):
        raise LstmDivergenceError("non-finite LSTM output")
    return log_probs, SequenceCache(xs, gates, c, h, log_probs)


def _backward(params: LstmParams, cache: SequenceCache, labels: np.ndarray) -> tuple[np.ndarray, ...]:
    n, H = cache.x.shape[0], params.hidden_size
    g = cache.gates
    f, i, gt, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
    c_prev, c_cur = cache.c[:-1], cache.c[1:]
    tc = np.tanh(c_cur)

    dlogits = np.exp(cache.log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    dV = dlogits.T @ cache.h[1:]
    dd = dlogits.sum(axis=0)
    dh_out = dlogits @ params.V

    # dz_t = [dc, dc, dc, dh] * K_t elementwise; dc_t accumulates dh_t * A_t
    A = o * (1.0 - tc * tc)
    K = np.concatenate([c_prev * f * (1.0 - f), gt * i * (1.0 - i), i * (1.0 - gt * gt), tc * o * (1.0 - o)], axis=1)
    dz = np.empty((n, 4 * H))
    WT = params.W.T
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    buf = np.empty((4, H))
    flat = buf.ravel()
    for t in range(n - 1, -1, -1):
        dh = buf[3]
        np.add(dh_out[t], dh_next, out=dh)
        dc = buf[0]
        np.multiply(dh, A[t], out=dc)
        dc += dc_next
        buf[1:3] = dc
        np.multiply(flat, K[t], out=dz[t])
        dh_next = WT @ dz[t]
        np.multiply(dc, f[t], out=dc_next)
    dW = dz.T @ cache.h[:-1]
    dU = dz.T @ cache.x
    db = dz.sum(axis=0)
    return dW, dU, db, dV, dd


def _labels_array(labels) -> np.ndarray:
    return np.fromiter((int(y) for y in labels), dtype=np.int64)


def loss_and_gradients(params: LstmParams, xs: np.ndarray, labels: Sequence[AnomalyClass]):
    """Mean per-step cross-entropy and its BPTT gradient, ordered as ``PARAM_NAMES``."""
    labels = _labels_array(labels)
    if len(labels) != len(xs):
        raise ValueError(f"{len(xs)} feature rows but {len(labels)} labels")
    log_probs, cache = forward_sequence(params, xs)
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    if not np.isfinite(loss):
        raise LstmDivergenceError("non-finite loss")
    return loss, _backward(params, cache, labels)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Bias-corrected Adam step applied to ``arrays`` in place."""
        if not self.m:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


@dataclass(frozen=True)
class LstmConfig:
    epochs: int = 500
    lr: float = 1e-3
    hidden: int = 64
    init_seed: int = 0
    grad_clip: float = 5.0
    forget_bias: float = 1.0

    def validate(self) -> None:
        if self.epochs < 1 or self.hidden < 1:
            raise ValueError("epochs and hidden must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    loss: float
    f_score: float


def macro_f_score(gold: np.ndarray, pred: np.ndarray, n_classes: int = N_CLASSES) -> float:
    """Unweighted mean of per-class F-scores (0 for a class with P + R = 0)."""
    scores = []
    for k in range(n_classes):
        tp = float(np.sum((pred == k) & (gold == k)))
        p_den, r_den = float(np.sum(pred == k)), float(np.sum(gold == k))
        p = tp / p_den if p_den else 0.0
        r = tp / r_den if r_den else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(np.mean(scores))


def forward_batch(params: LstmParams, batch: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Log-probabilities for several sequences at once (evaluation only, no caches).

    Sequences are right-padded and stepped together; padding never reaches
    earlier steps because the recurrence is causal.
    """
    if not batch:
        return []
    lengths = [len(xs) for xs in batch]
    if min(lengths) == 0:
        raise ValueError("forward_batch needs non-empty sequences")
    T, B, H = max(lengths), len(batch), params.hidden_size
    X = np.zeros((T, B, params.input_size))
    for k, xs in enumerate(batch):
        X[: lengths[k], k] = xs
    pre = X @ params.U.T + params.b
    WT = params.W.T
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((T, B, H))
    for t in range(T):
        z = h @ WT
        z += pre[t]
        a = expit(z)
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        c = a[:, :H] * c + a[:, H:2 * H] * a[:, 2 * H:3 * H]
        h = a[:, 3 * H:] * np.tanh(c)
        hs[t] = h
    logits = hs @ params.V.T + params.d
    shifted = logits - logits.max(axis=2, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    if not np.all(np.isfinite(log_probs)):
        raise LstmDivergenceError("non-finite LSTM output")
    return [log_probs[:n, k] for k, n in enumerate(lengths)]


def evaluate(params: LstmParams, data: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """(mean per-episode loss, macro F-score of per-step argmax) over encoded episodes."""
    outs = forward_batch(params, [xs for xs, _ in data])
    losses = [-lp[np.arange(len(ys)), ys].mean() for lp, (_, ys) in zip(outs, data)]
    gold = np.concatenate([ys for _, ys in data])
    pred = np.concatenate([np.argmax(lp, axis=1) for lp in outs])
    return float(np.mean(losses)), macro_f_score(gold, pred)


def train(
    train_episodes: Sequence[Episode],
    stats: FeaturizerStats,
    config: LstmConfig = LstmConfig(),
) -> tuple[LstmParams, list[CurvePoint]]:
    """Adam on one episode per update, shuffled each epoch.

    After every epoch the current parameters are scored on the whole training
    set; the curve holds that loss and macro F-score per epoch.
    """
    config.validate()
    if not train_episodes:
        raise ValueError("empty training set")
    data = [(encode_sequence(ep.observations, stats), _labels_array(ep.labels)) for ep in train_episodes]
    params = LstmParams.init(config.hidden, FEATURE_WIDTH, config.init_seed, config.forget_bias)
    arrays = [a.copy() for a in params.arrays()]
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.init_seed, 1])
    curve = []
    for epoch in range(config.epochs):
        for k in rng.permutation(len(data)):
            xs, ys = data[k]
            try:
                current = LstmParams(*arrays)
                loss, grads = loss_and_gradients(current, xs, ys)
            except (LstmDivergenceError, ValueError) as err:
                raise LstmDivergenceError(str(err), epoch) from err
            grads, _ = clip_global_norm(grads, config.grad_clip)
            adam.update(arrays, grads)
        try:
            loss, f_score = evaluate(LstmParams(*arrays), data)
        except (LstmDivergenceError, ValueError) as err:
            raise LstmDivergenceError(str(err), epoch) from err
        if not np.isfinite(loss):
            raise LstmDivergenceError("non-finite loss", epoch)
        curve.append(CurvePoint(epoch, loss, f_score))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d loss %.5f f %.4f", epoch, loss, f_score)
    return LstmParams(*arrays), curve


def predict_labels(params: LstmParams, stats: FeaturizerStats, observations: Sequence[Observation]) -> list[AnomalyClass]:
    """Per-step argmax; ties go to the lowest class index."""
    log_probs, _ = forward_sequence(params, encode_sequence(observations, stats))
    return [AnomalyClass(int(k)) for k in np.argmax(log_probs, axis=1)]


@dataclass(frozen=True, eq=False)
class LstmLabeler:
    params: LstmParams
    stats: FeaturizerStats

    def label_sequence(self, observations: Sequence[Observation]) -> list[AnomalyClass]:
        return predict_labels(self.params, self.stats, observations)
