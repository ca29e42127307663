import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from anomaly_ident import features, simulator
from anomaly_ident.episode import (
    ActionKind,
    ActionPhase,
    AnomalyClass,
    Episode,
    ExistenceBelief,
    Observation,
    SoundClass,
    labels_for,
)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_obs(t, laser=0.3, grip=5.0, force=0.0, sound=SoundClass.NoSound,
             existence=ExistenceBelief.Yes, offset=0.0, phase=None):
    return Observation(t, laser, grip, force, sound, existence, offset,
                       phase or ActionPhase(ActionKind.MoveTowardsObject, 0))


def make_episode(n=5, case=AnomalyClass.SAFE, onset=None, detection=None, ep_id="ep"):
    obs = [make_obs(t, laser=0.1 + 0.01 * t) for t in range(n)]
    labels = labels_for(n, case, onset)
    return Episode(ep_id, (ActionKind.MoveTowardsObject,), tuple(zip(obs, labels)), case, onset, detection)


@pytest.fixture(scope="session")
def small_dataset():
    return simulator.generate_dataset(4, 3, 4, 1, seed=11)


@pytest.fixture(scope="session")
def small_stats(small_dataset):
    return features.fit_stats(small_dataset)


@pytest.fixture(scope="session")
def default_dataset():
    return simulator.generate_dataset(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
