"""Independent brute-force reference implementations used as test oracles."""

import itertools
import math

import numpy as np

from anomaly_ident.episode import AnomalyClass
from anomaly_ident.features import CHANNEL_CARDINALITY, CHANNEL_NAMES
from anomaly_ident.hmm import HmmModel

LABEL_NAMES = [c.name for c in AnomalyClass]


def random_hmm(rng, cls=AnomalyClass.LOC):
    return HmmModel(
        anomaly_class=cls,
        initial=rng.dirichlet(np.ones(2)),
        transition=rng.dirichlet(np.ones(2), size=2),
        emission=tuple(rng.dirichlet(np.ones(card), size=2) for card in CHANNEL_CARDINALITY),
    )


def random_codes(rng, n):
    return np.array([[rng.integers(card) for card in CHANNEL_CARDINALITY] for _ in range(n)], dtype=np.int64)


def hmm_path_prob(model, codes, path):
    """Product form: pi(s0) b_s0(x0) prod a(s_{t-1}, s_t) b_st(x_t), with b a product over channels."""
    p = model.initial[path[0]]
    for t, s in enumerate(path):
        if t:
            p *= model.transition[path[t - 1], s]
        for ch in range(len(CHANNEL_CARDINALITY)):
            p *= model.emission[ch][s, codes[t][ch]]
    return p


def hmm_brute_force(model, codes):
    """(log-likelihood, most probable path) by enumerating all 2^n state paths."""
    n = len(codes)
    paths = list(itertools.product((0, 1), repeat=n))
    probs = [hmm_path_prob(model, codes, p) for p in paths]
    best = max(range(len(paths)), key=lambda k: probs[k])  # first max: lexicographically lowest path
    return math.log(math.fsum(probs)), list(paths[best])


def crf_score(model, codes, labels):
    """Sum of weights of active features, looked up by identity string."""
    w = dict(zip(model.index.to_list(), model.weights))
    total = 0.0
    prev = "START"
    for t, y in enumerate(labels):
        name = LABEL_NAMES[y]
        total += w[f"TRANS|{prev}|{name}"]
        for ch, code in enumerate(codes[t]):
            total += w.get(f"EMIT|{name}|{CHANNEL_NAMES[ch]}|{int(code)}", 0.0)
        prev = name
    return total


def crf_brute_force(model, codes):
    """(log Z, argmax label sequence) by enumerating all 4^n label sequences."""
    n = len(codes)
    seqs = list(itertools.product(range(4), repeat=n))
    scores = np.array([crf_score(model, codes, s) for s in seqs])
    m = scores.max()
    log_z = m + math.log(math.fsum(np.exp(scores - m)))
    return log_z, list(seqs[int(np.argmax(scores))]), scores


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def finite_difference(fun, x, idx, eps=1e-5):
    old = x[idx]
    x[idx] = old + eps
    fp = fun()
    x[idx] = old - eps
    fm = fun()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def naive_lstm(params, xs):
    """Scalar-loop LSTM forward pass returning per-step log-probabilities (n, 4)."""
    H = params.hidden_size
    h = [0.0] * H
    c = [0.0] * H
    out = []

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    for x in xs:
        gates = []
        for g in range(4):
            vals = []
            for k in range(H):
                r = g * H + k
                s = params.b[r]
                s += sum(params.W[r, j] * h[j] for j in range(H))
                s += sum(params.U[r, j] * x[j] for j in range(len(x)))
                vals.append(math.tanh(s) if g == 2 else sig(s))
            gates.append(vals)
        f, i, g_, o = gates
        c = [f[k] * c[k] + i[k] * g_[k] for k in range(H)]
        h = [o[k] * math.tanh(c[k]) for k in range(H)]
        logits = [params.d[a] + sum(params.V[a, k] * h[k] for k in range(H)) for a in range(4)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        out.append([v - lse for v in logits])
    return np.array(out)
