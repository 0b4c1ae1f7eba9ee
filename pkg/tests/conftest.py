import numpy as np
import pytest

from gsavatar.synth import capsule_person, synth_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """Four poses seen from the front and the back at 32 px, 16x8 anchor maps."""
    return synth_scene(7, resolution=32, n_frames=4, camera_orbit=(0.0, 180.0), layout_resolution=(16, 8))


@pytest.fixture(scope="session")
def coarse_person():
    return capsule_person(6, spacing=0.04)


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
