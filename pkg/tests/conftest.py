"""
Shared builders for the test suite.
"""

from pathlib import Path

import numpy as np
import pytest

from app.models import AuxCounts, ModelParams, RegressionCoefficients, SampleData, VarianceComponents
from app.reml import fit_reml
from app.simulation import PATTERN_X1, PATTERN_X2


DATA_DIR = Path(__file__).resolve().parent.parent / "data"

TRUE_THETA = VarianceComponents(
    sigma2_u1=0.05, sigma2_u2=0.08, rho_u=0.3,
    sigma2_e1=0.10, sigma2_e2=0.15, rho_e=-0.4,
)
TRUE_BETA = RegressionCoefficients(beta1=[2.0, 0.5], beta2=[3.0, -0.3])
TRUE_PARAMS = ModelParams(beta=TRUE_BETA, theta=TRUE_THETA)


def simulate_sample(
    params: ModelParams,
    n_d,
    seed: int = 0,
    unsampled: int = 0,
    extra=(5, 30),
) -> tuple[SampleData, AuxCounts]:
    """
    Sample from the model on the four-pattern design, with counts N_dt that
    exceed the sampled n_dt by a random margin drawn from ``extra``.
    """
    rng = np.random.default_rng(seed)
    D = len(n_d)
    X0 = np.zeros((4, 2, 4))
    X0[:, 0, :2] = PATTERN_X1
    X0[:, 1, 2:] = PATTERN_X2
    fixed = X0 @ params.beta.as_array()
    L_u = np.linalg.cholesky(params.theta.v_u)
    L_e = np.linalg.cholesky(params.theta.v_e)

    index, patterns, ys = [], [], []
    counts = np.zeros((D + unsampled, 4), dtype=np.int64)
    for d, n in enumerate(n_d):
        u = L_u @ rng.standard_normal(2)
        t = rng.integers(0, 4, size=n)
        e = rng.standard_normal((n, 2)) @ L_e.T
        ys.append(fixed[t] + u + e)
        patterns.append(t)
        index.append(np.full(n, d))
        counts[d] = np.bincount(t, minlength=4)
    counts += rng.integers(extra[0], extra[1] + 1, size=counts.shape)

    t_all = np.concatenate(patterns)
    domain_ids = [f"d{d + 1:02d}" for d in range(D + unsampled)]
    sample = SampleData(
        domain_ids=domain_ids,
        domain_index=np.concatenate(index),
        x1=PATTERN_X1[t_all],
        x2=PATTERN_X2[t_all],
        y=np.vstack(ys),
    )
    aux = AuxCounts(
        domain_ids=domain_ids,
        pattern_ids=["1", "2", "3", "4"],
        pattern_x1=PATTERN_X1,
        pattern_x2=PATTERN_X2,
        counts=counts,
    )
    return sample, aux


@pytest.fixture(scope="session")
def small_world():
    """Twelve sampled domains of varying size plus two unsampled ones."""
    n_d = [3, 4, 5, 6, 7, 8, 9, 10, 6, 5, 4, 8]
    return simulate_sample(TRUE_PARAMS, n_d, seed=11, unsampled=2)


@pytest.fixture(scope="session")
def small_fit(small_world):
    sample, _ = small_world
    return fit_reml(sample)


@pytest.fixture(scope="session")
def large_world():
    return simulate_sample(TRUE_PARAMS, [20] * 60, seed=3)


@pytest.fixture(scope="session")
def large_fit(large_world):
    sample, _ = large_world
    return fit_reml(sample)


@pytest.fixture
def data_paths():
    return {
        "data": str(DATA_DIR / "sample.csv"),
        "aux": str(DATA_DIR / "aux.csv"),
        "patterns": str(DATA_DIR / "patterns.csv"),
    }
