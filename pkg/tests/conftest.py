import math

import numpy as np
import pytest

from dissrabi.hilbert import SystemParams


def pytest_addoption(parser):
    parser.addoption("--headline", action="store_true", default=False,
                     help="run the large-size reproduction at Omega/omega0 = 1200 (hours)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--headline"):
        return
    skip = pytest.mark.skip(reason="headline reproduction needs --headline")
    for item in items:
        if "headline" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def fig2_np():
    return SystemParams.from_ratio(0.6)


@pytest.fixture
def fig2_smp():
    return SystemParams.from_ratio(1.4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_density(dim, rng, rank=None):
    rank = rank or dim
    A = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real


def random_state(dim, rng):
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def lam_c_multiple(factor, **kw):
    from dissrabi.meanfield import critical_coupling
    p = SystemParams(**kw)
    return p.replace(lam=factor * critical_coupling(p))


@pytest.fixture(scope="session")
def smp50():
    from dissrabi.liouville import converged_cutoff
    return converged_cutoff(SystemParams.from_ratio(1.4, Omega=50.0))


@pytest.fixture(scope="session")
def np50():
    from dissrabi.liouville import converged_cutoff
    return converged_cutoff(SystemParams.from_ratio(0.6, Omega=50.0))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert every sub-check."""
    def record(number, checks: dict, detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {number}: {status}"
        if failed:
            line += " (failed: " + ", ".join(failed) + ")"
        if detail:
            line += f" | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
