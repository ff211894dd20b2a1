import sys

import pytest
import torch

from tedio.config import ModelConfig
from tedio.model import init_params
from tedio.oracles import micro_config


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def micro_model(micro):
    model = init_params(micro, seed=3, dtype=torch.float64)
    model.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def toy_model():
    model = init_params(ModelConfig(), seed=0)
    model.requires_grad_(False)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
