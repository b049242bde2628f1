import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.config import RunConfig  # noqa: E402

# Small enough for a CPU test run: 6 single-eye patients split 3/2/1,
# four 64 x 16 fringes per eye (32 x 16 B-scans).
TINY = {
    "seed": 0,
    "phantom.n_eyes": 6,
    "phantom.n_patients": 6,
    "phantom.n_bscans_per_eye": 4,
    "phantom.n_k": 64,
    "phantom.width": 16,
    "phantom.speckle_density": 8,
    "phantom.split_ratios": (0.5, 0.25, 0.25),
    "data.select_every": 1,
    "augment.center_jitter": 4.0,
    "model.res_blocks": 1,
    "model.channels": 4,
    "model.disc_channels": (4, 8),
    "model.disc_strides": (1, 2),
    "model.dense_units": 8,
    "model.unet_base_channels": 4,
    "train.epochs": 1,
    "train.batch_size": 4,
    "train.eval_every": 3,
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale trend tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return RunConfig(dict(TINY))


@pytest.fixture
def phantom_dir(tmp_path, tiny_config):
    from src.processor import write_phantom
    out = str(tmp_path / "phantom")
    write_phantom(tiny_config, out)
    return out
