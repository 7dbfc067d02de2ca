import pytest
import torch

from calibnerf.config import load_config
from calibnerf.evaluate import make_scenes

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture
def smoke_cfg():
    return load_config("smoke")


@pytest.fixture
def smoke_scenes(smoke_cfg):
    return make_scenes(smoke_cfg.data, "train")


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
