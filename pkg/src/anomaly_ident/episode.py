"""Observations, episodes and their line-delimited JSON file format.

Each line of an episode file is one JSON object::

    {"version": 1, "id": "...", "plan": ["MoveTowardsObject", ...],
     "case_label": "LOC", "anomaly_onset": 12, "detection_step": 15,
     "samples": [{"t": 0, "laser_distance_m": 0.55, "gripper_position": 5.0,
                  "gripper_force": 0.0, "sound": "NoSound",
                  "target_existence": "Yes", "target_offset_m": 0.0,
                  "action": "MoveTowardsObject", "phase": 0, "label": "SAFE"},
                 ...]}

``anomaly_onset`` and ``detection_step`` are ``null`` for safe episodes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Optional

FORMAT_VERSION = 1
SAMPLE_RATE_HZ = 10.0
LASER_MAX_RANGE_M = 1.0


class EpisodeFormatError(ValueError):
    """Raised for records that cannot be parsed or violate an invariant."""


class AnomalyClass(IntEnum):
    SAFE = 0
    LOC = 1
    DIS = 2
    UNB = 3


ANOMALY_CLASSES = (AnomalyClass.LOC, AnomalyClass.DIS, AnomalyClass.UNB)


class ActionKind(Enum):
    MoveTowardsObject = "MoveTowardsObject"
    MoveToLocation = "MoveToLocation"
    PickUp = "PickUp"
    PutDown = "PutDown"
    PutDownOn = "PutDownOn"
    Push = "Push"

    @property
    def phase_count(self) -> int:
        return _PHASE_COUNTS[self]


_PHASE_COUNTS = {
    ActionKind.MoveTowardsObject: 5,
    ActionKind.MoveToLocation: 5,
    ActionKind.PickUp: 5,
    ActionKind.PutDown: 6,
    ActionKind.PutDownOn: 6,
    ActionKind.Push: 6,
}

ACTION_ORDER = tuple(ActionKind)
_PHASE_OFFSETS = {}
_offset = 0
for _kind in ACTION_ORDER:
    _PHASE_OFFSETS[_kind] = _offset
    _offset += _kind.phase_count
PHASE_VOCAB_SIZE = _offset  # 33
del _offset, _kind


class SoundClass(IntEnum):
    NoSound = 0
    Drop = 1
    EgoNoise = 2


class ExistenceBelief(IntEnum):
    Yes = 0
    No = 1
    Unknown = 2


@dataclass(frozen=True)
class ActionPhase:
    action: ActionKind
    phase_index: int

    def __post_init__(self):
        if not 0 <= self.phase_index < self.action.phase_count:
            raise ValueError(
                f"phase {self.phase_index} out of range for {self.action.value} "
                f"({self.action.phase_count} phases)"
            )

    @property
    def global_index(self) -> int:
        """Position of this (action, phase) pair in the 33-entry vocabulary."""
        return _PHASE_OFFSETS[self.action] + self.phase_index


def phase_from_global(index: int) -> ActionPhase:
    for kind in reversed(ACTION_ORDER):
        if index >= _PHASE_OFFSETS[kind]:
            return ActionPhase(kind, index - _PHASE_OFFSETS[kind])
    raise ValueError(f"bad global phase index {index}")


@dataclass(frozen=True)
class Observation:
    """One fused sensor sample."""

    t: int
    laser_distance_m: float
    gripper_position: float
    gripper_force: float
    sound: SoundClass
    target_existence: ExistenceBelief
    target_offset_m: float
    action_phase: ActionPhase

    def problems(self) -> list[str]:
        """Return the list of violated observation invariants (empty if valid)."""
        out = []
        for name in ("laser_distance_m", "gripper_position", "gripper_force", "target_offset_m"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} is not finite")
        if out:
            return out
        if not 0.0 <= self.laser_distance_m <= LASER_MAX_RANGE_M:
            out.append(f"laser_distance_m={self.laser_distance_m} outside [0, {LASER_MAX_RANGE_M}]")
        if not 0.0 <= self.gripper_position <= 100.0:
            out.append(f"gripper_position={self.gripper_position} outside [0, 100]")
        if not 0.0 <= self.gripper_force <= 100.0:
            out.append(f"gripper_force={self.gripper_force} outside [0, 100]")
        if self.target_existence == ExistenceBelief.Unknown and self.target_offset_m != 0.0:
            out.append("target_offset_m must be 0 when target_existence is Unknown")
        return out


@dataclass(frozen=True)
class Episode:
    id: str
    plan: tuple[ActionKind, ...]
    samples: tuple[tuple[Observation, AnomalyClass], ...]
    case_label: AnomalyClass
    anomaly_onset: Optional[int] = None
    detection_step: Optional[int] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def observations(self) -> list[Observation]:
        return [obs for obs, _ in self.samples]

    @property
    def labels(self) -> list[AnomalyClass]:
        return [label for _, label in self.samples]

    def problems(self) -> list[str]:
        """Full invariant check; returns human-readable violations."""
        out = []
        if not self.samples:
            return ["episode has no samples"]
        for i, (obs, label) in enumerate(self.samples):
            if obs.t != i:
                out.append(f"sample {i} has t={obs.t}, expected {i}")
            out.extend(f"sample {i}: {p}" for p in obs.problems())
        n = len(self.samples)
        if self.case_label == AnomalyClass.SAFE:
            if self.anomaly_onset is not None or self.detection_step is not None:
                out.append("safe episode must not carry anomaly_onset/detection_step")
            bad = [i for i, (_, y) in enumerate(self.samples) if y != AnomalyClass.SAFE]
            if bad:
                out.append(f"safe episode has non-SAFE label at step {bad[0]}")
        else:
            onset, det = self.anomaly_onset, self.detection_step
            if onset is None or det is None:
                out.append("anomalous episode needs anomaly_onset and detection_step")
            elif not 0 <= onset <= det < n:
                out.append(f"need 0 <= anomaly_onset ({onset}) <= detection_step ({det}) < {n}")
            else:
                for i, (_, y) in enumerate(self.samples):
                    want = AnomalyClass.SAFE if i < onset else self.case_label
                    if y != want:
                        out.append(f"label at step {i} is {y.name}, expected {want.name}")
                        break
        return out

    def validate(self) -> "Episode":
        problems = self.problems()
        if problems:
            raise EpisodeFormatError(f"episode {self.id!r}: " + "; ".join(problems[:3]))
        return self


def labels_for(n: int, case_label: AnomalyClass, onset: Optional[int]) -> list[AnomalyClass]:
    """Ground-truth label sequence: SAFE before onset, case_label from onset on."""
    if case_label == AnomalyClass.SAFE or onset is None:
        return [AnomalyClass.SAFE] * n
    return [AnomalyClass.SAFE] * onset + [case_label] * (n - onset)


# --- serialization ---------------------------------------------------------


def _sample_to_dict(obs: Observation, label: AnomalyClass) -> dict:
    return {
        "t": obs.t,
        "laser_distance_m": obs.laser_distance_m,
        "gripper_position": obs.gripper_position,
        "gripper_force": obs.gripper_force,
        "sound": obs.sound.name,
        "target_existence": obs.target_existence.name,
        "target_offset_m": obs.target_offset_m,
        "action": obs.action_phase.action.value,
        "phase": obs.action_phase.phase_index,
        "label": label.name,
    }


def episode_to_dict(ep: Episode) -> dict:
    return {
        "version": FORMAT_VERSION,
        "id": ep.id,
        "plan": [a.value for a in ep.plan],
        "case_label": ep.case_label.name,
        "anomaly_onset": ep.anomaly_onset,
        "detection_step": ep.detection_step,
        "samples": [_sample_to_dict(o, y) for o, y in ep.samples],
    }


def _real(d: dict, key: str) -> float:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise EpisodeFormatError(f"field {key!r} must be a number, got {v!r}")
    return float(v)


def _int(d: dict, key: str) -> int:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise EpisodeFormatError(f"field {key!r} must be an integer, got {v!r}")
    return v


def episode_from_dict(d: dict) -> Episode:
    if d.get("version") != FORMAT_VERSION:
        raise EpisodeFormatError(f"unsupported format version {d.get('version')!r}")
    try:
        samples = []
        for s in d["samples"]:
            obs = Observation(
                t=_int(s, "t"),
                laser_distance_m=_real(s, "laser_distance_m"),
                gripper_position=_real(s, "gripper_position"),
                gripper_force=_real(s, "gripper_force"),
                sound=SoundClass[s["sound"]],
                target_existence=ExistenceBelief[s["target_existence"]],
                target_offset_m=_real(s, "target_offset_m"),
                action_phase=ActionPhase(ActionKind(s["action"]), _int(s, "phase")),
            )
            samples.append((obs, AnomalyClass[s["label"]]))
        onset, det = d.get("anomaly_onset"), d.get("detection_step")
        ep = Episode(
            id=str(d["id"]),
            plan=tuple(ActionKind(a) for a in d["plan"]),
            samples=tuple(samples),
            case_label=AnomalyClass[d["case_label"]],
            anomaly_onset=None if onset is None else int(onset),
            detection_step=None if det is None else int(det),
        )
    except EpisodeFormatError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise EpisodeFormatError(f"malformed field: {exc!r}") from exc
    return ep.validate()


def write_episodes(episodes: Iterable[Episode], path: str | os.PathLike) -> None:
    """Write one JSON record per episode. Invalid episodes are rejected."""
    lines = []
    for ep in episodes:
        ep.validate()
        lines.append(json.dumps(episode_to_dict(ep), allow_nan=False, separators=(",", ":")))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise OSError(f"cannot write episodes to {os.fspath(path)}: {exc.strerror}") from exc


def read_episodes(path: str | os.PathLike) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                episodes.append(episode_from_dict(json.loads(line)))
            except (json.JSONDecodeError, EpisodeFormatError) as exc:
                raise EpisodeFormatError(f"{os.fspath(path)}:{lineno}: {exc}") from exc
    ids = [ep.id for ep in episodes]
    if len(set(ids)) != len(ids):
        raise EpisodeFormatError(f"{os.fspath(path)}: duplicate episode ids")
    return episodes
