"""Gaussian-mixture data with exact perturbed densities and scores.

Every SDE here has a Gaussian perturbation kernel ``N(m(t) x0, s(t)^2 I)``, so a
mixture of diagonal Gaussians stays a mixture of diagonal Gaussians at every
time: component k has mean ``m mu_k`` and variance ``m^2 sigma_k^2 + s^2``.
That gives closed-form ``log p_t``, ``grad log p_t`` and component posteriors
to test samplers and networks against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, ndtr

from .sde import SdeSpec

_LOG_2PI = np.log(2 * np.pi)
_TINY = 1e-300


class ScoreFunction:
    """Uniform ``score(x, t) -> grad_x log p_t(x)`` contract.

    ``x`` has shape ``(d,)`` or ``(B, d)``; ``t`` is a scalar or one time per
    row. Stochastic score functions (for example ones that sample a perturbed
    observation) draw from the ``rng`` they are handed, so callers must pass
    the stream of the chain being advanced.

    ``divergence``, when available, is the exact trace of the score Jacobian.
    """

    def __init__(
        self,
        fn: Callable,
        dim: int,
        source: str = "oracle",
        stochastic: bool = False,
        divergence: Optional[Callable] = None,
    ):
        self._fn = fn
        self.dim = int(dim)
        self.source = source
        self.stochastic = stochastic
        self.divergence = divergence

    def __call__(self, x, t, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"score function expects dim {self.dim}, got input of shape {x.shape}")
        if self.stochastic:
            if rng is None:
                raise ValueError(f"{self.source} score function is stochastic and needs an rng")
            return self._fn(x, t, rng)
        return self._fn(x, t)

    def __repr__(self):
        return f"ScoreFunction(source={self.source!r}, dim={self.dim})"


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of Gaussians with diagonal covariances.

    ``variances`` may be given per component as a scalar (isotropic) or as a
    length-d vector.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None] if w.size > 1 or mu.size == 1 else mu[None, :]
        var = np.asarray(self.variances, dtype=float)
        if var.ndim == 1 and var.size == w.size:
            var = var[:, None]
        try:
            var = np.array(np.broadcast_to(var, mu.shape))
        except ValueError:
            raise ValueError(f"variances of shape {np.shape(self.variances)} do not match means {mu.shape}") from None
        if w.ndim != 1 or mu.shape[0] != w.size:
            raise ValueError("need one mean per mixture weight")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if np.any(var <= 0) or not np.all(np.isfinite(var)) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be positive and all parameters finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.sqrt(self.variances[labels]) * z
        return (x, labels) if return_labels else x

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        second = sum(w * (np.diag(v) + np.outer(m, m)) for w, m, v in zip(self.weights, self.means, self.variances))
        return second - np.outer(mu, mu)

    def component(self, k: int) -> "GaussianMixture":
        return GaussianMixture(np.ones(1), self.means[k : k + 1], self.variances[k : k + 1])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PerturbedMixture:
    """``base`` pushed through the perturbation kernel at time ``t``.

    ``m`` and ``s`` are scalars, or arrays with one entry per query row when
    the mixture is evaluated at several times at once.
    """

    base: GaussianMixture
    t: np.ndarray
    m: np.ndarray
    s: np.ndarray

    def _expand(self, a):
        a = np.asarray(a, dtype=float)
        return a[..., None, None]

    @property
    def means(self) -> np.ndarray:
        return self._expand(self.m) * self.base.means

    @property
    def variances(self) -> np.ndarray:
        return self._expand(self.m) ** 2 * self.base.variances + self._expand(self.s) ** 2

    @property
    def dim(self) -> int:
        return self.base.dim


def perturb_gmm(gmm: GaussianMixture, sde: SdeSpec, t) -> PerturbedMixture:
    m, s = sde.perturbation_kernel(t)
    return PerturbedMixture(gmm, np.asarray(t, dtype=float), m, s)


def _component_terms(pm: PerturbedMixture, x):
    """Per-component log densities (with weights) and kernel scores."""
    x = np.asarray(x, dtype=float)
    means, var = pm.means, pm.variances
    diff = x[..., None, :] - means
    log_comp = np.log(pm.base.weights) - 0.5 * np.sum(_LOG_2PI + np.log(var) + diff * diff / var, axis=-1)
    return log_comp, -diff / var, var


def log_density(pm: PerturbedMixture, x) -> np.ndarray:
    log_comp, _, _ = _component_terms(pm, x)
    return logsumexp(log_comp, axis=-1)


def component_posterior(pm: PerturbedMixture, x) -> np.ndarray:
    log_comp, _, _ = _component_terms(pm, x)
    return np.exp(log_comp - logsumexp(log_comp, axis=-1, keepdims=True))


def log_component_posterior(pm: PerturbedMixture, x) -> np.ndarray:
    return np.log(np.maximum(component_posterior(pm, x), _TINY))


def score(pm: PerturbedMixture, x) -> np.ndarray:
    log_comp, comp_scores, _ = _component_terms(pm, x)
    r = np.exp(log_comp - logsumexp(log_comp, axis=-1, keepdims=True))
    return np.sum(r[..., None] * comp_scores, axis=-2)


def score_divergence(pm: PerturbedMixture, x) -> np.ndarray:
    """Exact Laplacian of ``log p_t``: trace of the mixture score Jacobian."""
    log_comp, comp_scores, var = _component_terms(pm, x)
    r = np.exp(log_comp - logsumexp(log_comp, axis=-1, keepdims=True))
    total = np.sum(r[..., None] * comp_scores, axis=-2)
    per_comp = -np.sum(1.0 / var, axis=-1) + np.sum(comp_scores**2, axis=-1)
    return np.sum(r * per_comp, axis=-1) - np.sum(total**2, axis=-1)


def cdf_1d(pm: PerturbedMixture, x) -> np.ndarray:
    if pm.dim != 1:
        raise ValueError("cdf_1d needs a one-dimensional mixture")
    x = np.asarray(x, dtype=float)
    mu = pm.means[..., 0]
    sd = np.sqrt(pm.variances[..., 0])
    return np.sum(pm.base.weights * ndtr((x[..., None] - mu) / sd), axis=-1)


def data_cdf(gmm: GaussianMixture) -> Callable:
    """CDF of a 1-D mixture at time zero."""
    pm = PerturbedMixture(gmm, np.zeros(()), np.ones(()), np.zeros(()))
    return lambda x: cdf_1d(pm, x)


def class_score(gmm: GaussianMixture, sde: SdeSpec, k: int, x, t) -> np.ndarray:
    """Score of ``p_t(x | y = k)``: the score of perturbed component ``k`` alone."""
    if not 0 <= k < gmm.n_components:
        raise ValueError(f"invalid class label {k} for a {gmm.n_components}-component mixture")
    return score(perturb_gmm(gmm.component(k), sde, t), x)


def tweedie_denoise(x, t, score_fn, sde: SdeSpec, rng=None) -> np.ndarray:
    """Posterior mean ``E[x0 | x_t = x] = (x + s(t)^2 score(x, t)) / m(t)``."""
    x = np.asarray(x, dtype=float)
    m, s = sde.perturbation_kernel(t)
    if np.ndim(m):
        m, s = m[..., None], s[..., None]
    return (x + s * s * call_score(score_fn, x, t, rng)) / m


def call_score(score_fn, x, t, rng=None) -> np.ndarray:
    """Evaluate a :class:`ScoreFunction` or a plain ``f(x, t)`` callable."""
    if isinstance(score_fn, ScoreFunction):
        return score_fn(x, t, rng)
    return score_fn(x, t)


def mixture_score_fn(gmm: GaussianMixture, sde: SdeSpec) -> ScoreFunction:
    """Exact time-dependent score of ``gmm`` perturbed by ``sde``."""
    return ScoreFunction(
        lambda x, t: score(perturb_gmm(gmm, sde, t), x),
        gmm.dim,
        source="oracle",
        divergence=lambda x, t: score_divergence(perturb_gmm(gmm, sde, t), x),
    )


def class_score_fn(gmm: GaussianMixture, sde: SdeSpec, k: int) -> ScoreFunction:
    return mixture_score_fn(gmm.component(k), sde)


def log_posterior_grad_fn(gmm: GaussianMixture, sde: SdeSpec, k: int) -> Callable:
    """``grad_x log p_t(y = k | x)`` of the exact time-dependent classifier."""

    def grad(x, t):
        pm = perturb_gmm(gmm, sde, t)
        return score(perturb_gmm(gmm.component(k), sde, t), x) - score(pm, x)

    return grad


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Single Gaussian with a full covariance, for correlated test data."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size) or not np.allclose(cov, cov.T):
            raise ValueError("cov must be a symmetric d x d matrix")
        evals, evecs = np.linalg.eigh(cov)
        if np.any(evals <= 0):
            raise ValueError("cov must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_evals", evals)
        object.__setattr__(self, "_evecs", evecs)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + (z * np.sqrt(self._evals)) @ self._evecs.T

    def _rotated(self, sde: SdeSpec, x, t):
        m, s = sde.perturbation_kernel(t)
        m, s = np.asarray(m)[..., None], np.asarray(s)[..., None]
        diff = (np.asarray(x, dtype=float) - m * self.mean) @ self._evecs
        return diff, m * m * self._evals + s * s

    def score(self, sde: SdeSpec, x, t) -> np.ndarray:
        diff, lam = self._rotated(sde, x, t)
        return (-diff / lam) @ self._evecs.T

    def log_density(self, sde: SdeSpec, x, t) -> np.ndarray:
        diff, lam = self._rotated(sde, x, t)
        return -0.5 * np.sum(_LOG_2PI + np.log(lam) + diff * diff / lam, axis=-1)

    def conditional(self, known: np.ndarray, values: np.ndarray):
        """Mean and covariance of the unknown coordinates given the known ones."""
        known = np.asarray(known)
        unknown = np.setdiff1d(np.arange(self.dim), known)
        s_uk = self.cov[np.ix_(unknown, known)]
        s_kk = self.cov[np.ix_(known, known)]
        gain = np.linalg.solve(s_kk, s_uk.T).T
        mean = self.mean[unknown] + gain @ (np.asarray(values, dtype=float) - self.mean[known])
        cov = self.cov[np.ix_(unknown, unknown)] - gain @ s_uk.T
        return mean, cov


def gaussian_score_fn(gauss: Gaussian, sde: SdeSpec) -> ScoreFunction:
    def divergence(x, t):
        m, s = sde.perturbation_kernel(t)
        lam = np.asarray(m)[..., None] ** 2 * gauss._evals + np.asarray(s)[..., None] ** 2
        return np.broadcast_to(-np.sum(1.0 / lam, axis=-1), np.shape(x)[:-1])

    return ScoreFunction(lambda x, t: gauss.score(sde, x, t), gauss.dim, source="oracle", divergence=divergence)
