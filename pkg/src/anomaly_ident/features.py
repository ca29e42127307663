"""Numeric and discrete encodings of observations.

The LSTM consumes a 43-wide vector per step::

    [laser, gripper_position, gripper_force]   min-max scaled to [0, 1]
    [target_offset]                            clipped to +-0.3 m, scaled to [-1, 1]
    [NoSound, Drop, EgoNoise]                  one-hot
    [Yes, No, Unknown]                         one-hot
    [33 action phases]                         one-hot, actions in ActionKind order

The HMM and CRF consume 7 integer channels: a 4-bin quantile code for each
of the four continuous channels, then sound, existence and the global phase
index verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .episode import (
    PHASE_VOCAB_SIZE,
    Episode,
    ExistenceBelief,
    Observation,
    SoundClass,
)

CONTINUOUS_CHANNELS = ("laser_distance_m", "gripper_position", "gripper_force", "target_offset_m")
CHANNEL_NAMES = CONTINUOUS_CHANNELS + ("sound", "target_existence", "action_phase")
N_BINS = 4
OFFSET_CLIP_M = 0.3
FEATURE_WIDTH = 3 + 1 + len(SoundClass) + len(ExistenceBelief) + PHASE_VOCAB_SIZE
# number of codes per discrete channel
CHANNEL_CARDINALITY = (N_BINS,) * 4 + (len(SoundClass), len(ExistenceBelief), PHASE_VOCAB_SIZE)


@dataclass(frozen=True)
class FeaturizerStats:
    """Per-channel ranges and quantile cut points fitted on training data.

    ``cuts[k]`` holds at most three strictly increasing cut points for
    continuous channel ``k``; it is empty for constant channels.
    """

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    cuts: tuple[tuple[float, ...], ...]

    @property
    def constant(self) -> tuple[bool, ...]:
        return tuple(lo >= hi for lo, hi in zip(self.mins, self.maxs))

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs), "cuts": [list(c) for c in self.cuts]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizerStats":
        stats = cls(
            mins=tuple(float(v) for v in d["mins"]),
            maxs=tuple(float(v) for v in d["maxs"]),
            cuts=tuple(tuple(float(v) for v in c) for c in d["cuts"]),
        )
        if not (len(stats.mins) == len(stats.maxs) == len(stats.cuts) == len(CONTINUOUS_CHANNELS)):
            raise ValueError("featurizer stats must describe 4 continuous channels")
        for c in stats.cuts:
            if any(b <= a for a, b in zip(c, c[1:])):
                raise ValueError(f"cut points not strictly increasing: {c}")
        return stats


def _continuous(obs: Observation) -> tuple[float, float, float, float]:
    return (obs.laser_distance_m, obs.gripper_position, obs.gripper_force, obs.target_offset_m)


def quantile_cuts(values: np.ndarray) -> tuple[float, ...]:
    """Equal-count 4-bin cut points (25/50/75th percentiles, linear interpolation).

    When heavy ties make the percentiles collide, the percentiles of the
    distinct values are used instead so the cuts stay strictly increasing.
    """
    distinct = np.unique(values)
    if distinct.size < 2:
        return ()
    qs = np.linspace(0, 1, N_BINS + 1)[1:-1]
    cuts = np.quantile(np.sort(values), qs)
    if np.any(np.diff(cuts) <= 0):
        cuts = np.unique(np.quantile(distinct, qs))
    return tuple(float(c) for c in cuts)


def fit_stats(train: Iterable[Episode]) -> FeaturizerStats:
    rows = [_continuous(obs) for ep in train for obs, _ in ep.samples]
    if not rows:
        raise ValueError("fit_stats needs at least one observation")
    data = np.asarray(rows, dtype=float)
    return FeaturizerStats(
        mins=tuple(float(v) for v in data.min(axis=0)),
        maxs=tuple(float(v) for v in data.max(axis=0)),
        cuts=tuple(quantile_cuts(data[:, k]) for k in range(data.shape[1])),
    )


def encode(obs: Observation, stats: FeaturizerStats) -> np.ndarray:
    vec = np.zeros(FEATURE_WIDTH)
    values = _continuous(obs)
    for k in range(3):
        lo, hi = stats.mins[k], stats.maxs[k]
        if hi <= lo:
            vec[k] = 0.5
        else:
            vec[k] = (min(max(values[k], lo), hi) - lo) / (hi - lo)
    vec[3] = min(max(values[3], -OFFSET_CLIP_M), OFFSET_CLIP_M) / OFFSET_CLIP_M
    base = 4
    vec[base + int(obs.sound)] = 1.0
    base += len(SoundClass)
    vec[base + int(obs.target_existence)] = 1.0
    base += len(ExistenceBelief)
    vec[base + obs.action_phase.global_index] = 1.0
    return vec


def encode_sequence(observations: Sequence[Observation], stats: FeaturizerStats) -> np.ndarray:
    """Stack ``encode`` over a sequence into an (n, 43) array."""
    return np.stack([encode(o, stats) for o in observations]) if observations else np.zeros((0, FEATURE_WIDTH))


def discretize(obs: Observation, stats: FeaturizerStats) -> tuple[int, ...]:
    # half-open bins [lo, hi): a value on a cut goes to the upper bin
    codes = [int(np.searchsorted(stats.cuts[k], v, side="right")) for k, v in enumerate(_continuous(obs))]
    codes += [int(obs.sound), int(obs.target_existence), obs.action_phase.global_index]
    return tuple(codes)


def discretize_sequence(observations: Sequence[Observation], stats: FeaturizerStats) -> np.ndarray:
    """(n, 7) integer array of discrete codes."""
    return np.array([discretize(o, stats) for o in observations], dtype=np.int64).reshape(-1, len(CHANNEL_NAMES))
