import math

import numpy as np
import pytest

from lodhom.coefficients import exp1_twofreq
from lodhom.correctors import compute_all_correctors
from lodhom.fem import FeSpace
from lodhom.geometry import build_uniform_mesh, refine_uniform


@pytest.fixture(scope="session")
def small_dirichlet():
    """n=4 coarse / 2-level fine Dirichlet pair with the two-frequency coefficient."""
    coarse = build_uniform_mesh(4)
    fine = refine_uniform(coarse, 2)
    cs = FeSpace(coarse, "dirichlet")
    fs = FeSpace(fine, "dirichlet")
    coeff = exp1_twofreq(fine)
    return cs, fs, coeff


@pytest.fixture(scope="session")
def ideal_correctors(small_dirichlet):
    """Idealized (ell=infinity) correctors on the small Dirichlet pair."""
    cs, fs, coeff = small_dirichlet
    return compute_all_correctors(math.inf, cs, fs, coeff)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
