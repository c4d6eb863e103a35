import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from motvox import model_pipeline as M
from motvox import ovoxel as O

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return M.ModelConfig(d_model=24, heads=2, layers=2, ffn=48, grid_n=8)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return M.MoTModel.init(tiny_cfg, 0)


@pytest.fixture(scope="session")
def small_traj():
    return O.make_trajectory(3, 2, grid_n=8)
