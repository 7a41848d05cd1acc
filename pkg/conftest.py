import pytest
import torch

from bench import ProblemSpec, build_problem


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def toy2():
    return build_problem(ProblemSpec(name="toy", dim=2))


@pytest.fixture
def gauss2():
    return build_problem(ProblemSpec(name="tfp-gauss", dim=2))


@pytest.fixture
def ou2():
    return build_problem(ProblemSpec(name="sfp-ou", dim=2))
