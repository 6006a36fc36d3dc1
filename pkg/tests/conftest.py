import numpy as np
import pytest
from hypothesis import strategies as st

from ncotrial.trial_data import TrialDataset


def make_data(rng, n=30, p_cov=1, p_nco=1, pi=0.5, min_arm=None, hetero=False):
    """Random trial with a prognostic covariate and NCO and a unit effect."""
    min_arm = p_cov + p_nco + 2 if min_arm is None else min_arm
    if n < 2 * min_arm:
        raise ValueError(f"n={n} cannot give two arms of {min_arm}")
    while True:
        a = (rng.random(n) < pi).astype(int)
        if min(a.sum(), n - a.sum()) >= min_arm:
            break
    x = rng.normal(size=(n, p_cov))
    nco = rng.normal(size=(n, p_nco)) + x.sum(axis=1, keepdims=True)
    noise = rng.normal(size=n) * (1 + a if hetero else 1)
    y = 1 + x.sum(axis=1) + 0.5 * nco.sum(axis=1) + a + noise
    return TrialDataset(
        treatment=a,
        outcome=y,
        design_pi=pi,
        covariates=x,
        ncos=nco,
        covariate_names=tuple(f"X{j}" for j in range(p_cov)),
        nco_names=tuple(f"N{j}" for j in range(p_nco)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@st.composite
def trials(draw, min_n=None, max_n=40, p_cov=1, p_nco=1):
    """Hypothesis strategy over seeded random trials."""
    seed = draw(st.integers(0, 2**32 - 1))
    lo = 2 * (p_cov + p_nco + 2) + 2 if min_n is None else min_n
    n = draw(st.integers(lo, max(lo, max_n)))
    rng = np.random.default_rng(seed)
    return make_data(rng, n=n, p_cov=p_cov, p_nco=p_nco, pi=draw(st.sampled_from([0.4, 0.5, 0.6])))


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
