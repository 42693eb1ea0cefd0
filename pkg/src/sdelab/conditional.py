"""Conditional generation: class conditioning, imputation and linear inverse problems.

Conditioning adds ``grad_x log p_t(y | x)`` to the unconditional score, and
the samplers consume the sum unchanged. Imputation replaces the known
coordinates at every step by a fresh draw from the forward kernel of the
observed values. This works because every supported SDE perturbs coordinates
independently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .mixture import Gaussian, GaussianMixture, ScoreFunction, call_score, gaussian_score_fn, log_posterior_grad_fn, mixture_score_fn
from .samplers import PcConfig, SampleBatch, pc_sample
from .sde import ParameterError, SdeSpec

# Exact orthonormal matrix whose 3-decimal rounding is the usual
# luminance/chrominance decoupling transform for RGB data.
COLOR_DECOUPLING = np.array(
    [
        [1 / math.sqrt(3), -math.sqrt(2 / 3), 0.0],
        [1 / math.sqrt(3), 1 / math.sqrt(6), 1 / math.sqrt(2)],
        [1 / math.sqrt(3), 1 / math.sqrt(6), -1 / math.sqrt(2)],
    ]
)


class ObservationKind(str, enum.Enum):
    CLASS = "CLASS"
    MASK = "MASK"
    LINEAR = "LINEAR"


@dataclass(frozen=True, eq=False)
class Observation:
    """What is known about ``x(0)``.

    Build with :meth:`class_label`, :meth:`mask` or :meth:`linear`.
    """

    kind: ObservationKind
    label: Optional[int] = None
    indices: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    noise_std: float = 0.0

    @classmethod
    def class_label(cls, k: int) -> "Observation":
        if int(k) != k or k < 0:
            raise ParameterError("label", f"class label must be a non-negative integer, got {k!r}")
        return cls(ObservationKind.CLASS, label=int(k))

    @classmethod
    def mask(cls, indices: Sequence[int], values) -> "Observation":
        idx = np.asarray(indices, dtype=int).ravel()
        vals = np.asarray(values, dtype=float).ravel()
        if idx.size == 0:
            raise ParameterError("indices", "mask must observe at least one coordinate")
        if np.unique(idx).size != idx.size:
            raise ParameterError("indices", "mask indices must be unique")
        if vals.shape != idx.shape:
            raise ParameterError("values", f"need one value per index, got {vals.size} for {idx.size}")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("values", "observed values must be finite")
        return cls(ObservationKind.MASK, indices=idx, values=vals)

    @classmethod
    def linear(cls, A, y, noise_std: float) -> "Observation":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if y.size != A.shape[0]:
            raise ParameterError("y", f"A has {A.shape[0]} rows but y has {y.size} entries")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise ParameterError("A", "observation matrix must have full row rank")
        if not noise_std >= 0:
            raise ParameterError("noise_std", "must be non-negative")
        return cls(ObservationKind.LINEAR, A=A, values=y, noise_std=float(noise_std))

    def validate(self, dim: int, n_components: Optional[int] = None) -> None:
        if self.kind is ObservationKind.CLASS:
            if n_components is not None and self.label >= n_components:
                raise ParameterError("label", f"class {self.label} invalid for {n_components} components")
        elif self.kind is ObservationKind.MASK:
            if np.any(self.indices < 0) or np.any(self.indices >= dim):
                raise ParameterError("indices", f"mask indices must lie in [0, {dim})")
            if self.indices.size >= dim:
                raise ParameterError("indices", "mask must leave at least one coordinate unknown")
        elif self.A.shape[1] != dim:
            raise ParameterError("A", f"A has {self.A.shape[1]} columns, data dimension is {dim}")


def as_score_fn(model, sde: SdeSpec) -> ScoreFunction:
    """Exact score for a mixture or Gaussian; a ScoreFunction passes through."""
    if isinstance(model, ScoreFunction):
        return model
    if isinstance(model, GaussianMixture):
        return mixture_score_fn(model, sde)
    if isinstance(model, Gaussian):
        return gaussian_score_fn(model, sde)
    raise TypeError(f"cannot build a score function from {type(model).__name__}")


def conditional_score(base: ScoreFunction, *obs_grads: Callable) -> ScoreFunction:
    """``base(x, t) + sum_k obs_grad_k(x, t)`` as a new ScoreFunction.

    Gradients may be plain ``f(x, t)`` callables or ScoreFunctions; the
    result is stochastic when any part is.
    """
    parts = (base,) + obs_grads
    for g in obs_grads:
        if isinstance(g, ScoreFunction) and g.dim != base.dim:
            raise ValueError(f"dimension mismatch: base has {base.dim}, gradient has {g.dim}")
    stochastic = any(isinstance(p, ScoreFunction) and p.stochastic for p in parts)

    def fn(x, t, rng=None):
        total = call_score(base, x, t, rng)
        for g in obs_grads:
            total = total + call_score(g, x, t, rng)
        return total

    if stochastic:
        return ScoreFunction(fn, base.dim, source="conditional", stochastic=True)
    return ScoreFunction(lambda x, t: fn(x, t), base.dim, source="conditional")


def class_conditional_sample(gmm: GaussianMixture, sde: SdeSpec, k: int, cfg: PcConfig) -> SampleBatch:
    """Sample ``p(x | y = k)`` with the exact time-dependent class posterior."""
    Observation.class_label(k).validate(gmm.dim, gmm.n_components)
    score_fn = conditional_score(mixture_score_fn(gmm, sde), log_posterior_grad_fn(gmm, sde, k))
    batch = pc_sample(sde, score_fn, cfg)
    batch.config["class_label"] = int(k)
    return batch


def mask_projector(obs: Observation, sde: SdeSpec) -> Callable:
    """``project(x, t, rng)`` that redraws known coordinates from ``N(m(t) y, s(t)^2)``."""
    idx, y = obs.indices, obs.values

    def project(x, t, rng):
        m, s = sde.perturbation_kernel(t)
        x = np.array(x, dtype=float)
        x[:, idx] = m * y + s * rng.standard_normal((x.shape[0], idx.size))
        return x

    return project


def impute(model, sde: SdeSpec, obs: Observation, cfg: PcConfig, dim: Optional[int] = None) -> SampleBatch:
    """Sample the unknown coordinates given ``obs`` (a MASK observation).

    The returned samples are full vectors with the known coordinates set to
    the observed values.
    """
    if obs.kind is not ObservationKind.MASK:
        raise ParameterError("observation", "impute needs a MASK observation")
    score_fn = as_score_fn(model, sde)
    dim = dim or score_fn.dim
    obs.validate(dim)

    def finalize(x, rng):
        x = np.array(x, dtype=float)
        x[:, obs.indices] = obs.values
        return x

    batch = pc_sample(sde, score_fn, cfg, project=mask_projector(obs, sde), finalize=finalize, dim=dim)
    batch.config["mask"] = obs.indices.tolist()
    batch.config["observed"] = obs.values.tolist()
    return batch


def check_orthogonal(C, tol: float = 1e-10) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ParameterError("C", "must be a square matrix")
    err = np.max(np.abs(C.T @ C - np.eye(C.shape[0])))
    if err > tol:
        raise ParameterError("C", f"not orthogonal: max |C^T C - I| = {err:.3g}")
    return C


def rotated_score(score_fn: ScoreFunction, C) -> ScoreFunction:
    """Score of ``u = C^T x`` given the score of ``x``: ``C^T score(C u)``."""
    C = check_orthogonal(C)

    def fn(u, t, rng=None):
        return call_score(score_fn, u @ C.T, t, rng) @ C

    if score_fn.stochastic:
        return ScoreFunction(fn, score_fn.dim, source="rotated", stochastic=True)
    return ScoreFunction(lambda u, t: fn(u, t), score_fn.dim, source="rotated")


def decoupled_impute(model, sde: SdeSpec, C, obs: Optional[Observation], cfg: PcConfig) -> SampleBatch:
    """Impute in the coordinates ``u = C^T x`` and map the samples back.

    An orthogonal map sends the isotropic forward noise to isotropic noise, so
    the forward kernel stays coordinatewise in ``u``. ``obs`` indexes
    ``u``-coordinates; ``None`` gives unconditional sampling in ``u``-space.
    """
    C = check_orthogonal(C)
    score_u = rotated_score(as_score_fn(model, sde), C)
    if obs is None:
        batch = pc_sample(sde, score_u, cfg)
    else:
        batch = impute(score_u, sde, obs, cfg)
    batch.samples = batch.samples @ C.T
    batch.config["transform"] = C.tolist()
    return batch


def linear_inverse_score(base: ScoreFunction, sde: SdeSpec, A, y, noise_std: float) -> ScoreFunction:
    """Score for ``y = A x + noise`` with a forward-perturbed observation.

    Each call draws ``y_hat ~ N(m(t) y, s(t)^2 I)`` from the caller's stream
    and adds ``A^T (y_hat - A x) / (noise_std^2 + s(t)^2)``.
    """
    obs = Observation.linear(A, y, noise_std)
    obs.validate(base.dim)
    A, y = obs.A, obs.values

    def fn(x, t, rng):
        m, s = sde.perturbation_kernel(t)
        X = np.atleast_2d(x)
        y_hat = m * y + s * rng.standard_normal((X.shape[0], y.size))
        grad = (y_hat - X @ A.T) @ A / (obs.noise_std**2 + s * s)
        return call_score(base, x, t, rng) + grad.reshape(np.shape(x))

    return ScoreFunction(fn, base.dim, source="linear-inverse", stochastic=True)
