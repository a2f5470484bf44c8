import numpy as np
import pytest

from fidcal.model import Design, InterlabDataset, ModelParams, simulate_dataset

SCENARIO_A = ModelParams.uniform(3, 1.0, 1.0, 0.1, 1.0)
DESIGN_A = Design((0.0, 10.0, 30.0), 5, q=3)
SCENARIO_B = ModelParams.uniform(10, 0.0, 1.0, 0.1, 1.0)
DESIGN_B = Design(tuple(float(x) for x in range(0, 45, 5)), 5, q=10)


@pytest.fixture(scope="session")
def data_a() -> InterlabDataset:
    return simulate_dataset(SCENARIO_A, DESIGN_A, seed=2024)


@pytest.fixture(scope="session")
def data_b() -> InterlabDataset:
    return simulate_dataset(SCENARIO_B, DESIGN_B, seed=7)


@pytest.fixture(scope="session")
def fit_a(data_a):
    from fidcal.estimation import fit_mle

    return fit_mle(data_a)


def noise_free(alpha=(1.0, 2.0), beta=(1.0, 0.5), conc=(0.0, 10.0, 30.0), reps=3) -> InterlabDataset:
    params = ModelParams(np.array(alpha), np.array(beta), 0.0, 0.0)
    return simulate_dataset(params, Design(conc, reps, q=len(alpha)), seed=0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
