import numpy as np
import pytest

from cmedit.io import save_frames
from cmedit.model import ToyDenoiser, encode_frame
from cmedit.schedule import build_schedule

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see whether the test body passed
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)


def make_video(m=8, size=64, seed=0, shift=2):
    """Smooth synthetic clip: a coloured disc drifting over a gradient."""
    gen = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    colour = gen.uniform(40, 215, 3)
    cx, cy = gen.uniform(size * 0.3, size * 0.7, 2)
    radius = size * gen.uniform(0.15, 0.3)
    tilt = gen.uniform(-1, 1, 3)
    frames = []
    for k in range(m):
        bg = 128 + 60 * np.tanh(tilt[None, None, :] * ((xx + yy)[..., None] / size - 1))
        disc = ((xx - cx - shift * k) ** 2 + (yy - cy) ** 2) < radius**2
        img = np.where(disc[..., None], colour[None, None, :], bg)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return frames


def latents_of(frames):
    return np.stack([encode_frame(f) for f in frames])


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def net():
    return ToyDenoiser()


@pytest.fixture
def video_dir(tmp_path):
    d = tmp_path / "in"
    save_frames(d, make_video())
    return d
