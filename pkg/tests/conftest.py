import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_poisson():
    """Coarse registered Poisson model shared by the pipeline and CLI tests."""
    from mongerb.rom_pipeline import PipelineOptions, offline_train

    opts = PipelineOptions(problem="poisson", pde_cells=12, ot_factor=2, n_s=20, tau=1e-3,
                           barycenter_max_iter=300, eim_samples=60)
    return offline_train(opts)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_record():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
