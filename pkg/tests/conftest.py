"""Shared fixtures: the scalar-tracking benchmark instance used throughout.

The plant is a 2-state unstable system with a single input; the cost asks
the first plant state to track an exogenous scalar s that hops between two
Gaussian regimes (means 7 and -1) according to a softmax-like feature map.
"""

import numpy as np
import pytest

from exolqr.environment import (
    FeatureMap,
    GaussianComponent,
    MixtureKernel,
    gaussian_bump_features,
)
from exolqr.riccati import CostMatrices, LinearSystem


@pytest.fixture
def tracking_system():
    return LinearSystem(A=[[1.8, 1.2], [0.0, 1.19]], B=[0.0, 1.0])


@pytest.fixture
def tracking_cost():
    # (x_1 - s)^2 + u^2, expanded into block weights
    return CostMatrices(W=[[1.0, 0.0], [0.0, 0.0]], R=1.0, F=[-1.0, 0.0], M=1.0)


@pytest.fixture
def tracking_features():
    return FeatureMap(
        d=2,
        evaluator=gaussian_bump_features(centers=[7.0, -1.0], widths=[5.0, 3.0]),
        delta_s=15.0,
        norm_bound_enforced=False,
    )


@pytest.fixture
def tracking_kernel(tracking_features):
    components = [GaussianComponent(7.0, 1.0), GaussianComponent(-1.0, 1.5)]
    return MixtureKernel(components, tracking_features)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
