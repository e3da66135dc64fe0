import numpy as np
import pytest

from cvad import data, training
from cvad.models import PRESETS
from cvad.training import TrainConfig

TINY = PRESETS["tiny"]
CFG = TrainConfig(epochs_stage1=2, epochs_stage2=2, batch_size=8, seed=3)


def id_images(n, seed=0, size=32):
    spec = data.SynthSpec(image_size=size, lesion_size=3)
    imgs = [data.render_id(data.sample_rng(seed, "id", i), spec)[0] for i in range(n)]
    return (np.stack(imgs)[:, None] / 255.0).astype(np.float32)


@pytest.fixture(scope="session")
def images():
    return id_images(26), id_images(6, seed=1)


@pytest.fixture(scope="session")
def full_ckpt(images):
    """(generator checkpoint, calibrated full checkpoint, log rows) on the tiny config."""
    train_x, val_x = images
    hist = []
    g = training.train_generator(train_x, val_x, TINY, CFG, deterministic=True, history=hist)
    f = training.train_discriminator(g, train_x, val_x, deterministic=True, history=hist)
    return g, training.calibrate(f, val_x), hist


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
