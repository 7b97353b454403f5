import numpy as np
import pytest

from plsgd import StepSchedule, make_logistic, make_oracle, make_quadratic


@pytest.fixture(scope="session")
def iso_quadratic():
    """d=10 isotropic quadratic with unit curvature: mu = L = 1."""
    return make_quadratic(10, np.ones(10))


@pytest.fixture(scope="session")
def aniso_quadratic():
    return make_quadratic(2, [0.5, 2.0])


@pytest.fixture(scope="session")
def small_logistic():
    return make_logistic(100, 5, data_seed=7, lambda_r=0.1)


@pytest.fixture()
def gaussian_oracle():
    return make_oracle("additive_gaussian", 1.0, 1, seed=0)


@pytest.fixture()
def theta_unit():
    return StepSchedule.theta_kind(1.0, 1.0)
