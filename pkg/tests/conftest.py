import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facerecon import face_model as fm  # noqa: E402
from facerecon.losses import Observation, RandomProjectionEmbedder  # noqa: E402
from facerecon.rasterizer import project_landmarks, render_image  # noqa: E402
from facerecon.scene import Camera  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    return fm.synthesize_toy_model()


@pytest.fixture(scope="session")
def cam64():
    return Camera.default(64, 64)


def random_coefficients(model, rng, pose_jitter=0.15, depth=600.0):
    return fm.CoefficientVector(
        rng.standard_normal(model.n_id), 0.5 * rng.standard_normal(model.n_exp),
        rng.standard_normal(model.n_tex),
        np.concatenate([[3.0 + 0.2 * rng.standard_normal()], 0.3 * rng.standard_normal(3),
                        0.1 * rng.standard_normal(5)]),
        np.concatenate([pose_jitter * rng.standard_normal(3),
                        [5 * rng.standard_normal(), 5 * rng.standard_normal(), depth + 10 * rng.standard_normal()]]))


def make_scene(model, cam, seed, perturb=0.3):
    """Observation rendered from one coefficient vector, and a nearby starting point."""
    rng = np.random.default_rng(seed)
    x_true = random_coefficients(model, rng)
    image = render_image(model, x_true, cam, (0.2, 0.5, 0.3)).color
    lm = project_landmarks(model, x_true, cam).points
    A = np.clip(rng.uniform(0.2, 1.2, size=image.shape[:2]), 0, 1)
    obs = Observation(image, lm + rng.normal(0, 0.5, lm.shape), A, cam, RandomProjectionEmbedder(), (0.2, 0.5, 0.3))
    flat = x_true.flatten()
    step = perturb * rng.standard_normal(flat.size)
    sl = fm.block_slices(model.dims)["pose"]
    step[sl] *= np.array([0.05, 0.05, 0.05, 3.0, 3.0, 3.0])
    x0 = fm.CoefficientVector.unflatten(flat + step, model.dims)
    return obs, x_true, x0


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
