import numpy as np
import pytest

from esfm.measurements import _from_arrays
from esfm.synth import SynthConfig, generate_scene, random_cameras, random_points, sample_visibility


def random_tensor(rng, m, n, visibility=0.6, noise=0.01):
    """Normalized-coordinate tensor from a random scene, plus its cameras and points."""
    cams = random_cameras(rng, m, 6.0, 0.2)
    pts = random_points(rng, n, 2.0)
    mask = sample_visibility(rng, m, n, visibility)
    ci, tj = np.nonzero(mask)
    pc = np.einsum("kab,kb->ka", cams.rotations[ci], pts[tj]) + cams.translations[ci]
    uv = pc[:, :2] / pc[:, 2:3] + noise * rng.normal(size=(len(ci), 2))
    return _from_arrays(m, n, ci, tj, uv), cams, pts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_scene():
    return generate_scene(SynthConfig(seed=0))


# acceptance criteria report one line each, collected here and printed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
