import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lesionseg.atlas import build_atlas
from lesionseg.phantom import PhantomSpec, generate, training_set

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SMALL = (16, 16, 16)


@pytest.fixture(scope="session")
def small_atlas():
    """Atlas built from 6 training phantoms on a 16^3 grid."""
    tr = training_set(PhantomSpec(dims=SMALL), 6)
    return build_atlas([p.labels for p in tr], [p.lesions for p in tr], (8, 8, 8), n_labels=5)


@pytest.fixture(scope="session")
def small_phantom():
    return generate(PhantomSpec(dims=SMALL, seed=3, n_lesions=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured numbers."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and rep.passed:
                continue
            name = nodeid.split("::")[-1]
            number = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((number, f"criterion {number}: {'PASS' if rep.passed else 'FAIL'}  {name}  {detail}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
