import numpy as np
import pytest

from critbranch import load_model, perron_data

SEED = 20110811


@pytest.fixture(scope="session")
def ref1():
    return load_model("ref1")


@pytest.fixture(scope="session")
def ref2():
    return load_model("ref2")


@pytest.fixture(scope="session")
def det1():
    return load_model("deterministic1")


@pytest.fixture(scope="session")
def det2():
    return load_model("deterministic2")


@pytest.fixture(scope="session")
def pd2(ref2):
    return perron_data(ref2.m_xi)


@pytest.fixture(scope="session")
def pd1(ref1):
    return perron_data(ref1.m_xi)


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    monkeypatch.setenv("CRITBRANCH_BACKEND", request.param)
    return request.param


def se_of_mean(x, axis=0):
    x = np.asarray(x, dtype=float)
    return x.std(axis=axis, ddof=1) / np.sqrt(x.shape[axis])


# acceptance criteria outcomes, printed as one line each at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {text}")
