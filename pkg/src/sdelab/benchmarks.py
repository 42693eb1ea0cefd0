"""Fixed data distributions shared by tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from .mixture import Gaussian, GaussianMixture


def bimodal_1d() -> GaussianMixture:
    """Asymmetric two-mode 1D mixture with zero mean."""
    return GaussianMixture([0.3, 0.7], [[-2.1], [0.9]], [0.25, 0.5])


def gmm_2d() -> GaussianMixture:
    """Two-component 2D mixture used for training and encoding checks."""
    return GaussianMixture([0.4, 0.6], [[-1.5, -1.0], [1.5, 1.0]], 0.3)


def separated_2d(separation: float = 10.0) -> GaussianMixture:
    """Equal-weight unit-variance mixture with means ``separation`` apart."""
    half = 0.5 * separation
    return GaussianMixture([0.5, 0.5], [[-half, 0.0], [half, 0.0]], 1.0)


def correlated_gaussian(rho: float = 0.8) -> Gaussian:
    """Zero-mean bivariate Gaussian with unit variances and correlation ``rho``."""
    return Gaussian(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))


DATASETS = {
    "bimodal_1d": bimodal_1d,
    "gmm_2d": gmm_2d,
    "separated_2d": separated_2d,
    "correlated_gaussian": correlated_gaussian,
}
