"""Bank of two-state (safe / anomaly) HMMs, one per anomaly class.

Emissions factor over the 7 discrete channels, so the emission probability of
a step is the product of one categorical per channel.  Parameters are fitted
by smoothed counting on annotated episodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .episode import ANOMALY_CLASSES, AnomalyClass, Episode, Observation
from .features import CHANNEL_CARDINALITY, FeaturizerStats, discretize_sequence

SAFE_STATE, ANOMALY_STATE = 0, 1


def _log(p: np.ndarray) -> np.ndarray:
    # hand-built models may contain exact zeros; log(0) = -inf is intended
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True)
class HmmModel:
    anomaly_class: AnomalyClass
    initial: np.ndarray  # (2,)
    transition: np.ndarray  # (2, 2), rows sum to 1
    emission: tuple[np.ndarray, ...]  # per channel, (2, n_codes)

    def emission_log_probs(self, codes: np.ndarray) -> np.ndarray:
        """(n, 2) array of log b_s(x_t) for an (n, 7) code array."""
        codes = np.asarray(codes)
        out = np.zeros((codes.shape[0], 2))
        for ch, table in enumerate(self.emission):
            out += _log(table[:, codes[:, ch]]).T
        return out

    def to_dict(self) -> dict:
        return {
            "anomaly_class": self.anomaly_class.name,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission": [e.tolist() for e in self.emission],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmmModel":
        return cls(
            anomaly_class=AnomalyClass[d["anomaly_class"]],
            initial=np.array(d["initial"], dtype=float),
            transition=np.array(d["transition"], dtype=float),
            emission=tuple(np.array(e, dtype=float) for e in d["emission"]),
        )


@dataclass(frozen=True)
class HmmBank:
    models: dict  # AnomalyClass -> HmmModel
    stats: FeaturizerStats

    def to_dict(self) -> dict:
        return {"models": [self.models[c].to_dict() for c in ANOMALY_CLASSES]}

    @classmethod
    def from_dict(cls, d: dict, stats: FeaturizerStats) -> "HmmBank":
        models = {m.anomaly_class: m for m in map(HmmModel.from_dict, d["models"])}
        if set(models) != set(ANOMALY_CLASSES):
            raise ValueError("an HMM bank needs exactly one model per anomaly class")
        return cls(models, stats)

    def label_sequence(self, observations: Sequence[Observation]) -> list[AnomalyClass]:
        return classify_sequence(self, observations)


def _hidden_states(labels: Sequence[AnomalyClass]) -> np.ndarray:
    return np.array([SAFE_STATE if y == AnomalyClass.SAFE else ANOMALY_STATE for y in labels])


def transition_counts(states: np.ndarray) -> np.ndarray:
    counts = np.zeros((2, 2))
    np.add.at(counts, (states[:-1], states[1:]), 1.0)
    return counts


def fit_model(
    anomaly_class: AnomalyClass,
    sequences: Sequence[tuple[np.ndarray, np.ndarray]],
    smoothing: float = 1.0,
) -> HmmModel:
    """Smoothed maximum-likelihood fit from (codes, hidden states) pairs."""
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    init = np.full(2, smoothing)
    trans = np.full((2, 2), smoothing)
    emit = [np.full((2, card), smoothing) for card in CHANNEL_CARDINALITY]
    for codes, states in sequences:
        init[states[0]] += 1.0
        trans += transition_counts(states)
        for ch in range(len(emit)):
            np.add.at(emit[ch], (states, codes[:, ch]), 1.0)
    return HmmModel(
        anomaly_class=anomaly_class,
        initial=init / init.sum(),
        transition=trans / trans.sum(axis=1, keepdims=True),
        emission=tuple(e / e.sum(axis=1, keepdims=True) for e in emit),
    )


def fit_supervised(train: Sequence[Episode], stats: FeaturizerStats, smoothing: float = 1.0) -> HmmBank:
    models = {}
    for cls in ANOMALY_CLASSES:
        eps = [ep for ep in train if ep.case_label == cls]
        if not eps:
            raise ValueError(f"no {cls.name} episodes in the training set")
        seqs = [(discretize_sequence(ep.observations, stats), _hidden_states(ep.labels)) for ep in eps]
        models[cls] = fit_model(cls, seqs, smoothing)
    return HmmBank(models, stats)


def log_likelihood(model: HmmModel, codes: np.ndarray) -> float:
    """Forward algorithm, log P(codes | model)."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        raise ValueError("empty observation sequence")
    log_b = model.emission_log_probs(codes)
    log_a = _log(model.transition)
    alpha = _log(model.initial) + log_b[0]
    for t in range(1, codes.shape[0]):
        alpha = logsumexp(alpha[:, None] + log_a, axis=0) + log_b[t]
    return float(logsumexp(alpha))


def viterbi(model: HmmModel, codes: np.ndarray) -> np.ndarray:
    """Most probable hidden path (0 = safe, 1 = anomaly); ties go to safe."""
    codes = np.asarray(codes)
    n = codes.shape[0]
    if n == 0:
        raise ValueError("empty observation sequence")
    log_b = model.emission_log_probs(codes)
    log_a = _log(model.transition)
    v = _log(model.initial) + log_b[0]
    back = np.zeros((n, 2), dtype=np.int64)
    for t in range(1, n):
        cand = v[:, None] + log_a  # cand[k, i]: from k into i
        back[t] = np.argmax(cand, axis=0)
        v = cand[back[t], [0, 1]] + log_b[t]
    path = np.zeros(n, dtype=np.int64)
    path[-1] = int(np.argmax(v))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def select_model(bank: HmmBank, codes: np.ndarray) -> HmmModel:
    """Highest-likelihood model; ties resolved in LOC, DIS, UNB order."""
    best, best_score = None, -np.inf
    for cls in ANOMALY_CLASSES:
        score = log_likelihood(bank.models[cls], codes)
        if score > best_score:
            best, best_score = bank.models[cls], score
    return best


def classify_sequence(bank: HmmBank, observations: Sequence[Observation]) -> list[AnomalyClass]:
    if len(observations) == 0:
        raise ValueError("empty observation sequence")
    codes = discretize_sequence(observations, bank.stats)
    model = select_model(bank, codes)
    path = viterbi(model, codes)
    return [AnomalyClass.SAFE if s == SAFE_STATE else model.anomaly_class for s in path]
