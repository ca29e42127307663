"""Scripted generator of labeled manipulation episodes.

Every action expands into its phases and every phase emits
``samples_per_phase`` observations.  Nominal sensor values come from the
per-(action, phase) tables below; Gaussian noise with the fixed base
standard deviations in ``NOISE_STD`` (scaled by ``noise_level``) is added to
the continuous channels, and the classified channels suffer occasional
confusions (ego noise vs. silence, vision dropouts to Unknown).

Random numbers come from three independent streams per seed: ``variation``
(object sizes, distances, stable placement offsets), ``noise`` and
``anomaly`` (injection time and magnitude).  A SAFE episode and an anomalous
episode generated from the same seed therefore share every noise draw and
differ only where the anomaly acts.

Anomaly mechanics
-----------------
LOC
    During an approach phase the target is slid to a final offset of 5 to
    15 cm over ``LOC_SLIDE_STEPS`` steps.  It stays in view while moving
    (existence Yes), the laser no longer hits it and grasping closes on air.
    Detection fires once the offset reaches 5 cm.
DIS
    During an approach phase the target is removed.  While the arm occludes
    the spot existence stays Unknown; the first unoccluded step reports No.
    Laser and grasp behave as for LOC.
UNB (BuildTower only)
    The first put-down-on releases its block with an excess offset; that
    release is the onset.  The final put-down-on then topples the tower:
    a Drop sound is heard and the stacked target is lost or badly displaced.

Recorded episodes stop ``samples_per_phase`` steps after the detection step,
mirroring a robot that halts once the anomaly is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .episode import (
    LASER_MAX_RANGE_M,
    ActionKind,
    ActionPhase,
    AnomalyClass,
    Episode,
    ExistenceBelief,
    Observation,
    SoundClass,
    labels_for,
)

MTO = ActionKind.MoveTowardsObject
MTL = ActionKind.MoveToLocation
PICK = ActionKind.PickUp
PUT = ActionKind.PutDown
PUT_ON = ActionKind.PutDownOn
PUSH = ActionKind.Push

# laser (m), gripper_position, gripper_force (0-100 scale)
NOISE_STD = {"laser": 0.01, "gripper_position": 1.5, "gripper_force": 1.5, "offset": 0.004}
SOUND_CONFUSION_P = 0.03  # NoSound <-> EgoNoise, per step, times noise_level
VISION_DROPOUT_P = 0.03  # Yes -> Unknown, per step, times noise_level

GRIPPER_REST = 5.0
GRIPPER_OPEN = 100.0
GRIPPER_EMPTY_CLOSE = 0.0
LOC_MIN_OFFSET_M = 0.05
LOC_SLIDE_STEPS = (4, 8)  # inclusive range of steps a relocation takes
STABLE_MAX_OFFSET_M = 0.012


class ScenarioKind(Enum):
    PushObject = "PushObject"
    PickObject = "PickObject"
    BuildTower = "BuildTower"


PLANS = {
    ScenarioKind.PushObject: (MTO, PUSH),
    ScenarioKind.PickObject: (MTO, PICK, MTL, PUT),
    ScenarioKind.BuildTower: (MTO, PICK, PUT_ON, MTO, PICK, PUT_ON),
}

# Per phase: (laser_start, laser_end, gripper, force, sound, visible, aims_at_target)
# laser "far" = episode start distance; gripper/force symbols:
#   "carry" -> aperture/hold force while holding, rest/0 otherwise
#   "open", "grasp", "rest", "hold", "push", 0.0
_N, _E = SoundClass.NoSound, SoundClass.EgoNoise
PHASE_TABLE = {
    MTO: (
        ("far", "far", "carry", "carry", _N, True, False),  # started
        ("far", "far", "carry", "carry", _N, True, False),  # planning
        ("far", 0.30, "carry", "carry", _E, True, True),  # moving
        (0.30, 0.15, "carry", "carry", _E, False, True),  # approaching
        (0.15, 0.15, "carry", "carry", _N, False, True),  # arrived
    ),
    MTL: (
        (0.10, 0.10, "carry", "carry", _N, True, False),
        (0.10, 0.10, "carry", "carry", _N, True, False),
        (0.10, 0.30, "carry", "carry", _E, True, False),
        (0.30, 0.20, "carry", "carry", _E, True, False),
        (0.20, 0.20, "carry", "carry", _N, True, False),
    ),
    PICK: (
        (0.15, 0.15, "rest", 0.0, _N, False, True),  # started
        (0.15, 0.04, "rest", 0.0, _E, False, True),  # approaching-object
        (0.04, 0.04, "open", 0.0, _E, False, True),  # gripper-open
        (0.04, 0.04, "grasp", "hold", _E, False, True),  # gripper-close
        (0.04, 0.04, "carry", "carry", _E, True, False),  # lift
    ),
    PUT: (
        (0.20, 0.20, "carry", "carry", _N, True, False),  # started
        (0.20, 0.05, "carry", "carry", _E, False, False),  # move-down
        (0.05, 0.05, "carry", "carry", _N, False, False),  # contact
        (0.05, 0.05, "open", 0.0, _E, False, False),  # release
        (0.05, 0.25, "open", 0.0, _E, True, False),  # retreat
        (0.25, 0.25, "rest", 0.0, _N, True, False),  # done
    ),
    PUSH: (
        (0.15, 0.15, "rest", 0.0, _N, True, True),  # started
        (0.15, 0.04, "rest", 0.0, _E, False, True),  # approach-contact
        (0.04, 0.04, "rest", "push", _N, False, True),  # contact
        (0.04, 0.04, "rest", "push", _E, False, True),  # pushing
        (0.04, 0.10, "rest", 0.0, _E, False, True),  # release
        (0.10, 0.30, "rest", 0.0, _E, True, False),  # retreat
    ),
}
PHASE_TABLE[PUT_ON] = PHASE_TABLE[PUT]

# phases during which an external agent may interfere with the target
APPROACH_PHASES = {(MTO, 2), (MTO, 3), (PICK, 1), (PUSH, 1)}


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    anomaly: AnomalyClass = AnomalyClass.SAFE
    seed: int = 0
    noise_level: float = 1.0
    samples_per_phase: int = 8

    def validate(self) -> None:
        if self.anomaly == AnomalyClass.UNB and self.kind != ScenarioKind.BuildTower:
            raise ValueError(f"UNB anomalies need a BuildTower scenario, not {self.kind.value}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.samples_per_phase < 1:
            raise ValueError("samples_per_phase must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class _Trace:
    """Per-step nominal channels for a whole plan, before noise."""

    phases: list
    laser: np.ndarray
    gripper: np.ndarray
    force: np.ndarray
    sound: np.ndarray
    existence: np.ndarray
    offset: np.ndarray
    aims: np.ndarray


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _draw_variation(spec: ScenarioSpec) -> dict:
    rng = _rng(spec.seed, 0)
    return {
        "far": rng.uniform(0.45, 0.65),
        "object_height": rng.uniform(0.05, 0.09),
        "aperture": rng.uniform(35.0, 65.0),
        "hold": rng.uniform(35.0, 55.0),
        "push": rng.uniform(12.0, 22.0),
        "placements": rng.uniform(0.0, STABLE_MAX_OFFSET_M, size=2) * rng.choice([-1.0, 1.0], size=2),
    }


def _script(plan, var: dict, spp: int, missing_from: Optional[int], placements) -> _Trace:
    """Build nominal channels; ``missing_from`` is the step the target vanishes."""
    phases, laser, grip, force, sound, vis, offs, aims = [], [], [], [], [], [], [], []
    holding = False
    placed = 0  # number of completed put-down-on actions
    t = 0
    for action in plan:
        for p, (l0, l1, g, f, snd, visible, aim) in enumerate(PHASE_TABLE[action]):
            l0 = var["far"] if l0 == "far" else l0
            l1 = var["far"] if l1 == "far" else l1
            for j in range(spp):
                missing = missing_from is not None and t >= missing_from
                frac = j / spp
                value = l0 + (l1 - l0) * frac
                if aim and missing:
                    value += var["object_height"]
                if g == "grasp":
                    holding = not missing
                gv = {
                    "carry": var["aperture"] if holding else GRIPPER_REST,
                    "grasp": var["aperture"] if holding else GRIPPER_EMPTY_CLOSE,
                    "open": GRIPPER_OPEN,
                    "rest": GRIPPER_REST,
                }[g]
                if f == "carry" or f == "hold":
                    fv = var["hold"] if holding else 0.0
                elif f == "push":
                    fv = 0.0 if missing else var["push"]
                else:
                    fv = f
                # offset of the tracked target relative to where it should be
                ov = 0.0
                if action == PUT_ON and p == 0 and placed > 0:
                    ov = placements[placed - 1]
                elif action == PUT_ON and p >= 4:
                    ov = placements[placed]
                phases.append(ActionPhase(action, p))
                laser.append(value)
                grip.append(gv)
                force.append(fv)
                sound.append(int(snd))
                vis.append(visible)
                offs.append(ov)
                aims.append(aim)
                t += 1
            if action in (PUT, PUT_ON) and p == 3:
                holding = False
        if action == PUT_ON:
            placed += 1
    existence = np.where(np.array(vis), int(ExistenceBelief.Yes), int(ExistenceBelief.Unknown))
    offset = np.where(np.array(vis), np.array(offs), 0.0)
    return _Trace(
        phases, np.array(laser), np.array(grip), np.array(force), np.array(sound),
        existence, offset, np.array(aims),
    )


def _steps_where(trace: _Trace, pred) -> list[int]:
    return [t for t, ph in enumerate(trace.phases) if pred(ph)]


def generate_episode(spec: ScenarioSpec, episode_id: Optional[str] = None) -> Episode:
    spec.validate()
    plan = PLANS[spec.kind]
    spp = spec.samples_per_phase
    var = _draw_variation(spec)
    placements = list(var["placements"])
    arng = _rng(spec.seed, 2)

    onset = None
    missing_from = None
    loc_offset = 0.0
    collapse = None
    if spec.anomaly in (AnomalyClass.LOC, AnomalyClass.DIS):
        probe = _script(plan, var, spp, None, placements)
        candidates = _steps_where(probe, lambda ph: (ph.action, ph.phase_index) in APPROACH_PHASES)
        onset = int(candidates[arng.integers(len(candidates))])
        missing_from = onset
        loc_offset = arng.uniform(LOC_MIN_OFFSET_M, 0.15) * arng.choice([-1.0, 1.0])
    elif spec.anomaly == AnomalyClass.UNB:
        placements[0] = arng.uniform(0.025, 0.045) * arng.choice([-1.0, 1.0])
        probe = _script(plan, var, spp, None, placements)
        put_on = _steps_where(probe, lambda ph: ph.action == PUT_ON)
        first_release = [t for t in put_on if probe.phases[t].phase_index == 3 and t < len(probe.phases) // 2]
        onset = first_release[0]
        late = [t for t in put_on if t >= len(probe.phases) // 2 and probe.phases[t].phase_index in (2, 3)]
        collapse = int(late[arng.integers(len(late))])

    trace = _script(plan, var, spp, missing_from, placements)
    n = len(trace.phases)
    existence = trace.existence.copy()
    offset = trace.offset.copy()
    sound = trace.sound.copy()

    if spec.anomaly == AnomalyClass.LOC:
        # the agent slides the object away over a few steps rather than teleporting it
        slide = int(arng.integers(LOC_SLIDE_STEPS[0], LOC_SLIDE_STEPS[1] + 1))
        existence[onset:] = int(ExistenceBelief.Yes)
        offset[onset:] = loc_offset * np.minimum(1.0, np.arange(1, n - onset + 1) / slide)
    elif spec.anomaly == AnomalyClass.DIS:
        seen = existence[onset:] == int(ExistenceBelief.Yes)
        existence[onset:][seen] = int(ExistenceBelief.No)
        offset[onset:] = 0.0
    elif spec.anomaly == AnomalyClass.UNB:
        sound[collapse:collapse + 2] = int(SoundClass.Drop)
        lost = arng.random() < 0.5
        scatter = arng.uniform(0.08, 0.2) * arng.choice([-1.0, 1.0])
        after = np.arange(n) > collapse
        seen = after & (existence == int(ExistenceBelief.Yes))
        if lost:
            existence[seen] = int(ExistenceBelief.No)
            offset[seen] = 0.0
        else:
            offset[seen] = scatter

    detection = None
    if spec.anomaly == AnomalyClass.LOC:
        detection = onset + int(np.argmax(np.abs(offset[onset:]) >= LOC_MIN_OFFSET_M - 1e-12))
    elif spec.anomaly == AnomalyClass.DIS:
        detection = onset + int(np.argmax(existence[onset:] == int(ExistenceBelief.No)))
    elif spec.anomaly == AnomalyClass.UNB:
        detection = collapse

    # noise: drawn over the full plan so that same-seed episodes share it
    nrng = _rng(spec.seed, 1)
    z = nrng.standard_normal((n, 4)) * spec.noise_level
    u = nrng.random((n, 2))
    laser = np.clip(trace.laser + z[:, 0] * NOISE_STD["laser"], 0.0, LASER_MAX_RANGE_M)
    grip = np.clip(trace.gripper + z[:, 1] * NOISE_STD["gripper_position"], 0.0, 100.0)
    force = np.clip(trace.force + z[:, 2] * NOISE_STD["gripper_force"], 0.0, 100.0)
    swap = (u[:, 0] < SOUND_CONFUSION_P * spec.noise_level) & (sound != int(SoundClass.Drop))
    sound = np.where(swap, int(SoundClass.NoSound) + int(SoundClass.EgoNoise) - sound, sound)
    dropout = (u[:, 1] < VISION_DROPOUT_P * spec.noise_level) & (existence == int(ExistenceBelief.Yes))
    if detection is not None:
        dropout[detection] = False
    existence = np.where(dropout, int(ExistenceBelief.Unknown), existence)
    visible = existence != int(ExistenceBelief.Unknown)
    offset = np.where(visible, offset + z[:, 3] * NOISE_STD["offset"], 0.0)

    length = n if detection is None else min(n, detection + spp)
    labels = labels_for(length, spec.anomaly, onset)
    samples = tuple(
        (
            Observation(
                t=t,
                laser_distance_m=float(laser[t]),
                gripper_position=float(grip[t]),
                gripper_force=float(force[t]),
                sound=SoundClass(int(sound[t])),
                target_existence=ExistenceBelief(int(existence[t])),
                target_offset_m=float(offset[t]),
                action_phase=trace.phases[t],
            ),
            labels[t],
        )
        for t in range(length)
    )
    if episode_id is None:
        episode_id = f"{spec.kind.value}-{spec.anomaly.name}-{spec.seed}"
    return Episode(
        id=episode_id,
        plan=plan,
        samples=samples,
        case_label=spec.anomaly,
        anomaly_onset=onset,
        detection_step=detection,
    ).validate()


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Seed of the ``index``-th child: splitmix64(master + (index + 1) * golden)."""
    return splitmix64((master + (index + 1) * _GOLDEN) & _MASK64)


_ROUND_ROBIN = (ScenarioKind.PushObject, ScenarioKind.PickObject, ScenarioKind.BuildTower)


def generate_dataset(
    n_dis: int = 49,
    n_unb: int = 39,
    n_loc: int = 32,
    n_safe: int = 0,
    seed: int = 0,
    noise_level: float = 1.0,
    samples_per_phase: int = 8,
) -> list[Episode]:
    """Episodes ordered DIS, UNB, LOC, SAFE; defaults follow the recorded data set."""
    if min(n_dis, n_unb, n_loc, n_safe) < 0:
        raise ValueError("episode counts must be non-negative")
    episodes = []
    index = 0
    for anomaly, count in (
        (AnomalyClass.DIS, n_dis),
        (AnomalyClass.UNB, n_unb),
        (AnomalyClass.LOC, n_loc),
        (AnomalyClass.SAFE, n_safe),
    ):
        for j in range(count):
            kind = ScenarioKind.BuildTower if anomaly == AnomalyClass.UNB else _ROUND_ROBIN[j % 3]
            spec = ScenarioSpec(kind, anomaly, derive_seed(seed, index), noise_level, samples_per_phase)
            episodes.append(generate_episode(spec, f"ep{index:04d}-{kind.value}-{anomaly.name}"))
            index += 1
    return episodes
