import pytest
from hypothesis import settings

from metalab.model import linear_point_model

from helpers import ACCEPTANCE, anisotropic_point_model

settings.register_profile("metalab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("metalab")


@pytest.fixture(scope="session")
def model_a():
    return linear_point_model()


@pytest.fixture(scope="session")
def model_a_repelling():
    return linear_point_model(a=0.5)


@pytest.fixture(scope="session")
def anisotropic():
    return anisotropic_point_model()


@pytest.fixture(scope="session")
def anisotropic_solution(anisotropic):
    from metalab.spectral import solve_model

    return anisotropic.surfaces[0], solve_model(anisotropic)[0]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
