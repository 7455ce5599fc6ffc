import os
from unittest.mock import patch

import numpy as np
import pytest

from rtchmc.covest import build_cov_model, normalize, synthetic_spiked_data
from rtchmc.manifolds import Sphere, Stiefel
from rtchmc.models import BvmfParams
from rtchmc.targets import bvmf_target


@pytest.fixture
def rng():
    """Seeded generator so statistical tests are reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def sphere2():
    return Sphere(2)


@pytest.fixture
def stiefel62():
    return Stiefel(6, 2)


@pytest.fixture
def stiff_bvmf():
    """BVMF on S^2 with A = diag(-1000, 0, 1000), c = (100, 0, 0)."""
    return bvmf_target(
        BvmfParams(A=np.diag([-1000.0, 0.0, 1000.0]), c=np.array([100.0, 0.0, 0.0]))
    )


@pytest.fixture
def mild_bvmf_params():
    """BVMF on S^2 with A = diag(-2, 0, 2), c = (1, 0, 0)."""
    return BvmfParams(A=np.diag([-2.0, 0.0, 2.0]), c=np.array([1.0, 0.0, 0.0]))


@pytest.fixture
def mild_bvmf(mild_bvmf_params):
    return bvmf_target(mild_bvmf_params)


@pytest.fixture
def small_cov_model():
    """Spiked covariance model with p=8, m=2 fitted to 12 synthetic vectors."""
    data, _ = synthetic_spiked_data(8, 2, 12, np.random.default_rng(7))
    return build_cov_model(normalize(data), m=2)


@pytest.fixture
def mock_env_vars(tmp_path):
    """Point the default output directory into tmp_path."""
    with patch.dict(os.environ, {"RTCHMC_OUTPUT_DIR": str(tmp_path / "runs")}):
        yield tmp_path / "runs"
