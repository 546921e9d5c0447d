import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvsdf.core import Camera, look_at

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, width=64, height=48):
    f = rng.uniform(40.0, 90.0)
    return Camera(
        f, f * rng.uniform(0.9, 1.1), (width - 1) / 2 + rng.uniform(-3, 3), (height - 1) / 2 + rng.uniform(-3, 3),
        random_rotation(rng), rng.normal(size=3), width, height,
    )


def camera_pair(rng, width=64, height=48, baseline=0.6):
    """Two cameras looking at the origin from roughly 3 units away."""
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    side = np.cross(eye, [0.0, 1.0, 0.0])
    side /= np.linalg.norm(side)
    f = 0.9 * width
    kw = dict(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)
    a = look_at(eye, np.zeros(3), (0.0, 1.0, 0.0), **kw)
    b = look_at(eye + baseline * side, np.zeros(3), (0.0, 1.0, 0.0), **kw)
    return a, b


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store and print the one-line verdict for an acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
