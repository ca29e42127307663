"""Online identification loop: buffer fused observations, label on detection, vote.

The loop consumes one observation per step and asks the detector whether an
anomaly fired.  On firing, the labeler labels the whole buffered history and
the episode verdict is the majority vote over those labels.  If the detector
never fires, every step is SAFE.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol, Sequence

from .episode import (
    ANOMALY_CLASSES,
    SAMPLE_RATE_HZ,
    ActionPhase,
    AnomalyClass,
    Episode,
    ExistenceBelief,
    Observation,
    SoundClass,
)


class Labeler(Protocol):
    def label_sequence(self, observations: Sequence[Observation]) -> Sequence[AnomalyClass]:
        ...


class Detector(Protocol):
    """Streaming anomaly flag; ``start`` is called once per episode, then ``step`` per observation."""

    def start(self, episode: Episode) -> None:
        ...

    def step(self, t: int, observation: Observation) -> bool:
        ...


class ReplayDetector:
    """Fires at the episode's recorded detection step (never, for safe episodes)."""

    def __init__(self):
        self._fire_at: Optional[int] = None

    def start(self, episode: Episode) -> None:
        det = episode.detection_step
        if det is not None and not 0 <= det < len(episode):
            raise ValueError(f"detection_step {det} outside episode {episode.id!r} of length {len(episode)}")
        self._fire_at = det

    def step(self, t: int, observation: Observation) -> bool:
        return self._fire_at is not None and t == self._fire_at


class NeverDetector:
    def start(self, episode: Episode) -> None:
        pass

    def step(self, t: int, observation: Observation) -> bool:
        return False


@dataclass(frozen=True)
class IdentificationResult:
    labels: tuple[AnomalyClass, ...]
    final: AnomalyClass
    votes: Mapping[AnomalyClass, int]
    detection_step: Optional[int]

    def to_text(self) -> str:
        det = "none" if self.detection_step is None else str(self.detection_step)
        votes = " ".join(f"{c.name}={self.votes.get(c, 0)}" for c in AnomalyClass)
        return (
            f"final: {self.final.name}\n"
            f"detection_step: {det}\n"
            f"votes: {votes}\n"
            f"labels: {' '.join(y.name for y in self.labels)}\n"
        )


def majority_vote(labels: Sequence[AnomalyClass]) -> AnomalyClass:
    """Most frequent anomaly label; SAFE only when no step carries an anomaly label.

    Ties among anomaly classes resolve in LOC, DIS, UNB order.  SAFE steps do
    not vote because the history always includes the pre-onset prefix, which
    would otherwise outvote a short post-onset stretch.
    """
    if len(labels) == 0:
        raise ValueError("majority_vote needs at least one label")
    counts = Counter(AnomalyClass(y) for y in labels)
    best = max(ANOMALY_CLASSES, key=lambda c: (counts[c], -int(c)))
    return best if counts[best] > 0 else AnomalyClass.SAFE


def run_episode(labeler: Labeler, detector: Detector, episode: Episode) -> IdentificationResult:
    detector.start(episode)
    history: list[Observation] = []
    fired_at = None
    for t, obs in enumerate(episode.observations):
        history.append(obs)
        if detector.step(t, obs):
            fired_at = t
            break
    if fired_at is None:
        labels = tuple([AnomalyClass.SAFE] * len(history))
    else:
        labels = tuple(AnomalyClass(y) for y in labeler.label_sequence(history))
        if len(labels) != len(history):
            raise ValueError(f"labeler returned {len(labels)} labels for {len(history)} observations")
    counts = Counter(labels)
    votes = {c: counts.get(c, 0) for c in AnomalyClass}
    return IdentificationResult(labels, majority_vote(labels), votes, fired_at)


# --- sensor fusion -----------------------------------------------------------

MODALITY_DEFAULTS = {
    "laser_distance_m": 0.0,
    "gripper_position": 0.0,
    "gripper_force": 0.0,
    "sound": SoundClass.NoSound,
    "target_existence": ExistenceBelief.Unknown,
    "target_offset_m": 0.0,
}
MODALITIES = tuple(MODALITY_DEFAULTS) + ("action_phase",)


def _first_step_at_or_after(seconds: float, rate_hz: float) -> int:
    # tolerance absorbs float error such as 0.3 * 10 = 2.9999999999999996
    return max(0, math.ceil(seconds * rate_hz - 1e-9))


def fuse_stream(
    streams: Mapping[str, Sequence[tuple[float, object]]],
    n_steps: Optional[int] = None,
    rate_hz: float = SAMPLE_RATE_HZ,
) -> list[Observation]:
    """Zero-order hold of per-modality ``(seconds, value)`` samples onto the step grid.

    Steps before a modality's first sample take its default (NoSound, Unknown,
    0.0).  The action phase has no neutral value, so it must be present and
    its first sample is held backwards to step 0.  Without ``n_steps`` the
    grid ends at the step of the latest sample.
    """
    unknown = set(streams) - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if not streams.get("action_phase"):
        raise ValueError("fuse_stream needs at least one action_phase sample")
    for name, samples in streams.items():
        times = [s for s, _ in samples]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError(f"{name} stream is not monotone in time")
    if n_steps is None:
        latest = max(s for samples in streams.values() for s, _ in samples)
        n_steps = _first_step_at_or_after(latest, rate_hz) + 1
    if n_steps < 1:
        raise ValueError("n_steps must be positive")

    columns = {}
    for name in MODALITIES:
        samples = list(streams.get(name, ()))
        default = samples[0][1] if name == "action_phase" else MODALITY_DEFAULTS[name]
        col = [default] * n_steps
        for k, (seconds, value) in enumerate(samples):
            lo = _first_step_at_or_after(seconds, rate_hz)
            hi = _first_step_at_or_after(samples[k + 1][0], rate_hz) if k + 1 < len(samples) else n_steps
            for t in range(lo, min(hi, n_steps)):
                col[t] = value
        columns[name] = col

    out = []
    for t in range(n_steps):
        phase = columns["action_phase"][t]
        if not isinstance(phase, ActionPhase):
            raise ValueError(f"action_phase samples must be ActionPhase, got {type(phase).__name__}")
        out.append(
            Observation(
                t=t,
                laser_distance_m=float(columns["laser_distance_m"][t]),
                gripper_position=float(columns["gripper_position"][t]),
                gripper_force=float(columns["gripper_force"][t]),
                sound=SoundClass(columns["sound"][t]),
                target_existence=ExistenceBelief(columns["target_existence"][t]),
                target_offset_m=float(columns["target_offset_m"][t]),
                action_phase=phase,
            )
        )
    return out


def streams_from_observations(observations: Sequence[Observation], rate_hz: float = SAMPLE_RATE_HZ) -> dict:
    """Inverse view of fused output: one sample per step per modality."""
    return {
        name: [(obs.t / rate_hz, getattr(obs, name)) for obs in observations]
        for name in MODALITIES
    }
