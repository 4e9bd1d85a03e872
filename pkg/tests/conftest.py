import sys
from pathlib import Path

import numpy as np
import pytest

from msm_aipw.data import Dataset
from msm_aipw.nuisance import KnownSurvivalModel, NuisanceTriple, PropensityModel

sys.path.insert(0, str(Path(__file__).parent))


def _surv(rate0, slope):
    # exp{-t * rate0 * exp(0.6 a + slope z)}; large t hits the 0.05 floor
    def fn(grid, a, z):
        lp = np.log(rate0) + 0.6 * a + slope * z[:, 0]
        return np.exp(-np.exp(lp)[:, None] * grid[None, :])
    return fn


@pytest.fixture
def tiny():
    """Five subjects, two events, two censorings and one administrative censoring."""
    return Dataset(x=[0.4, 1.1, 0.7, 2.5, 3.0], delta=[1, 0, 1, 0, 0], a=[1, 0, 0, 1, 1],
                   z=[[0.3], [-1.2], [0.8], [0.1], [-0.5]], tau=3.0)


@pytest.fixture
def tiny_nuisance():
    return NuisanceTriple(PropensityModel(np.array([0.2, 0.9])), KnownSurvivalModel(_surv(0.5, 0.4)),
                          KnownSurvivalModel(_surv(0.1, -0.7)), clip_ps=(0.1, 0.9), clip_surv=0.05)


@pytest.fixture
def tiny_nuisance_alt():
    return NuisanceTriple(PropensityModel(np.array([-0.4, 2.5])), KnownSurvivalModel(_surv(1.2, -0.3)),
                          KnownSurvivalModel(_surv(0.2, 0.5)), clip_ps=(0.1, 0.9), clip_surv=0.05)
