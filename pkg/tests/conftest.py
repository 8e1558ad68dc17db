import numpy as np
import pytest

from casecohort.bernstein import SieveConfig
from casecohort.dataset import CohortDataset, SamplingDesign
from casecohort.simulation import Scenario, generate_cohort
from casecohort.update import rng_stream

# End-of-study time giving a case rate near 0.2 for the default scenario.
U_PC20 = 1.15


def make_cohort(n=300, seed=0, setup="x_only", q_s=0.2, q_c=1.0, sigma_e=0.3, u=U_PC20, beta=0.3):
    sc = Scenario(n=n, covariate_setup=setup, q_s=q_s, q_c=q_c, sigma_e=sigma_e, u=u, beta=beta)
    data = generate_cohort(sc, rng_stream(seed, 99))
    if q_s == 1.0:
        data = data.with_design(SamplingDesign(1.0, q_c))
    return data


def random_problem_data(rng, n=50, d=2):
    """Small synthetic interval-censored cohort with mixed interval types."""
    x = rng.normal(size=(n, d))
    t = rng.exponential(1.0, n)
    grid = np.sort(rng.uniform(0.1, 3.0, (n, 4)), axis=1)
    left = np.where(grid < t[:, None], grid, 0.0).max(axis=1)
    above = np.where(grid >= t[:, None], grid, np.inf)
    right = above.min(axis=1)
    return CohortDataset.from_arrays(left, right, SamplingDesign(1.0), x=x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cohort():
    return make_cohort()


@pytest.fixture(scope="session")
def cohort_xz():
    return make_cohort(n=400, seed=3, setup="x_and_z", q_c=0.5)


@pytest.fixture
def unit_sieve():
    return SieveConfig(degree=1, sigma=1.0, tau=2.0)
