import numpy as np
import pytest

from recdistill.schedule import build_schedule
from recdistill.worldmodel import PoseLabeledMixture


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000)


@pytest.fixture(scope="session")
def biased_1d():
    """Two well-separated 1D modes carrying 0.8 / 0.2 of the mass."""
    return PoseLabeledMixture(
        weights=np.array([0.8, 0.2]),
        means=np.array([[-3.0], [3.0]]),
        covs=np.array([[[1.0]], [[1.0]]]),
        category_of=np.array([0, 1]),
        num_categories=2,
    )


@pytest.fixture(scope="session")
def balanced_1d():
    return PoseLabeledMixture(
        weights=np.array([0.5, 0.5]),
        means=np.array([[-3.0], [3.0]]),
        covs=np.array([[[1.0]], [[1.0]]]),
        category_of=np.array([0, 1]),
        num_categories=2,
    )


@pytest.fixture(scope="session")
def mixed_2d():
    """A 2D three-component mixture spanning two categories."""
    return PoseLabeledMixture(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[-2.0, 0.0], [2.0, 1.0], [0.0, -2.5]]),
        covs=np.array([
            [[1.0, 0.3], [0.3, 0.8]],
            [[0.6, -0.1], [-0.1, 0.9]],
            [[0.5, 0.0], [0.0, 0.4]],
        ]),
        category_of=np.array([0, 1, 1]),
        num_categories=2,
    )


def random_mixture(rng, dim, num_categories):
    """Small random but well-conditioned pose-labeled mixture."""
    n_comp = num_categories + rng.integers(0, 3)
    w = rng.dirichlet(np.ones(n_comp) * 5.0)
    means = rng.uniform(-3.0, 3.0, size=(n_comp, dim))
    covs = np.empty((n_comp, dim, dim))
    for k in range(n_comp):
        a = rng.standard_normal((dim, dim)) * 0.3
        covs[k] = a @ a.T + np.eye(dim) * rng.uniform(0.3, 1.0)
    cats = np.concatenate([
        np.arange(num_categories),
        rng.integers(0, num_categories, size=n_comp - num_categories),
    ])
    return PoseLabeledMixture(
        weights=w, means=means, covs=covs,
        category_of=cats, num_categories=num_categories,
    )
