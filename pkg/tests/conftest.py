import numpy as np
import pytest

from epicast.model import ModelParams, simulate_panel


@pytest.fixture(scope="session")
def small_truth():
    return ModelParams(
        beta=np.array([1.0, -0.17, 0.41]),
        sigma_eta=0.5,
        sigma_b=np.array([0.0072, 0.0325, 0.2392]),
        pi_outlier=0.1,
        sigma_omega=3.4,
        psi=0.001,
    )


@pytest.fixture(scope="session")
def small_panel(small_truth):
    panel, state = simulate_panel(
        small_truth, n_countries=4, t_count=40, gamma_init=np.full(4, np.log(5.0)), seed=7
    )
    return panel, state
