"""VE, VP and sub-VP SDEs, their Gaussian perturbation kernels, and the
discrete SMLD / DDPM Markov chains they generalize."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np


class SdeKind(str, enum.Enum):
    VE = "VE"
    VP = "VP"
    SUBVP = "SubVP"

    @classmethod
    def parse(cls, value: "str | SdeKind") -> "SdeKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown SDE kind {value!r}; expected one of VE, VP, SubVP")


DEFAULTS = {
    "sigma_min": 0.01,
    "sigma_max": 50.0,
    "beta_min": 0.1,
    "beta_max": 20.0,
    "t_max": 1.0,
    "eps_train": 1e-5,
}
# eps used when sampling; VP-type SDEs stop at 1e-3 so x(eps) matches the
# variance of x_1 in DDPM.
EPS_SAMPLE = {SdeKind.VE: 1e-5, SdeKind.VP: 1e-3, SdeKind.SUBVP: 1e-3}


class ParameterError(ValueError):
    """An SDE or schedule parameter is out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def one_minus_exp_neg(u):
    """``1 - exp(-u)`` without cancellation for small ``u``."""
    return -np.expm1(-np.asarray(u, dtype=float))


@dataclass(frozen=True)
class SdeSpec:
    """A validated forward SDE ``dx = f(x, t) dt + g(t) dw`` on ``[0, t_max]``.

    VE uses ``sigma_min``/``sigma_max``; VP and SubVP use ``beta_min``/``beta_max``
    with the linear schedule ``beta(t) = beta_min + t (beta_max - beta_min)``.
    The unused pair keeps its default and is ignored.

    Queries on a VE SDE below ``eps_train`` are clamped to ``eps_train``:
    ``sigma(0) = 0`` while ``sigma(0+) = sigma_min``, so the process is only
    defined away from zero. VP and SubVP are evaluated exactly on ``[0, t_max]``.
    """

    kind: SdeKind
    sigma_min: float = DEFAULTS["sigma_min"]
    sigma_max: float = DEFAULTS["sigma_max"]
    beta_min: float = DEFAULTS["beta_min"]
    beta_max: float = DEFAULTS["beta_max"]
    t_max: float = DEFAULTS["t_max"]
    eps_train: float = DEFAULTS["eps_train"]
    eps_sample: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", SdeKind.parse(self.kind))
        for name in ("sigma_min", "sigma_max", "beta_min", "beta_max", "t_max", "eps_train", "eps_sample"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(name, f"must be a positive finite number, got {value!r}")
        if self.kind is SdeKind.VE and not self.sigma_min < self.sigma_max:
            raise ParameterError("sigma_max", f"need sigma_min < sigma_max, got {self.sigma_min} >= {self.sigma_max}")
        if self.kind is not SdeKind.VE and not self.beta_min < self.beta_max:
            raise ParameterError("beta_max", f"need beta_min < beta_max, got {self.beta_min} >= {self.beta_max}")
        if not self.eps_train <= self.eps_sample < self.t_max:
            raise ParameterError(
                "eps_sample", f"need 0 < eps_train <= eps_sample < t_max, got {self.eps_train}, {self.eps_sample}, {self.t_max}"
            )

    # -- schedules -----------------------------------------------------------

    def _time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.t_max * (1 + 1e-12)):
            raise ValueError(f"time outside [0, {self.t_max}]: {t}")
        if self.kind is SdeKind.VE:
            t = np.maximum(t, self.eps_train)
        return t

    def beta(self, t):
        t = self._time(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def integrated_beta(self, t):
        """Closed form of the integral of beta over ``[0, t]``."""
        t = self._time(t)
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def sigma(self, t):
        """VE noise level ``sigma_min (sigma_max / sigma_min)^t``."""
        t = self._time(t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    # -- coefficients --------------------------------------------------------

    def drift(self, x, t):
        """Drift ``f(x, t)``; ``t`` may be a scalar or one time per row of ``x``."""
        x = np.asarray(x, dtype=float)
        if self.kind is SdeKind.VE:
            self._time(t)
            return np.zeros_like(x)
        b = self.beta(t)
        if b.ndim:
            b = b.reshape(b.shape + (1,) * (x.ndim - b.ndim))
        return -0.5 * b * x

    def drift_divergence(self, t, dim: int):
        """Divergence of the drift, which is linear and coordinatewise."""
        if self.kind is SdeKind.VE:
            return np.zeros_like(self._time(t))
        return -0.5 * dim * self.beta(t)

    def diffusion(self, t):
        t = self._time(t)
        if self.kind is SdeKind.VE:
            ratio = self.sigma_max / self.sigma_min
            return self.sigma(t) * np.sqrt(2.0 * np.log(ratio))
        if self.kind is SdeKind.VP:
            return np.sqrt(self.beta(t))
        return np.sqrt(self.beta(t) * one_minus_exp_neg(2.0 * self.integrated_beta(t)))

    def perturbation_kernel(self, t):
        """Mean coefficient ``m(t)`` and std ``s(t)`` of ``p_0t(x_t | x_0)``."""
        t = self._time(t)
        if self.kind is SdeKind.VE:
            return np.ones_like(t), self.sigma(t)
        ib = self.integrated_beta(t)
        mean = np.exp(-0.5 * ib)
        if self.kind is SdeKind.VP:
            return mean, np.sqrt(one_minus_exp_neg(ib))
        return mean, one_minus_exp_neg(ib)

    def transition_kernel(self, s, t):
        """Kernel of ``x(t) | x(s)`` for ``s <= t``, as ``(mean coeff, variance)``.

        Derived from the SDE coefficients over ``[s, t]`` directly rather than by
        dividing marginal kernels, so composing it with ``perturbation_kernel(s)``
        is an independent consistency check.
        """
        s = self._time(s)
        t = self._time(t)
        if np.any(s > t):
            raise ValueError("transition_kernel needs s <= t")
        if self.kind is SdeKind.VE:
            return np.ones_like(t), self.sigma(t) ** 2 - self.sigma(s) ** 2
        delta = self.integrated_beta(t) - self.integrated_beta(s)
        mean = np.exp(-0.5 * delta)
        if self.kind is SdeKind.VP:
            return mean, one_minus_exp_neg(delta)
        # int_s^t beta(u) (1 - e^{-2B(u)}) e^{-(B(t) - B(u))} du
        bs, bt = self.integrated_beta(s), self.integrated_beta(t)
        return mean, one_minus_exp_neg(delta) - np.exp(-bt) * (np.exp(-bs) - np.exp(-bt))

    # -- prior ---------------------------------------------------------------

    @property
    def prior_std(self) -> float:
        return self.sigma_max if self.kind is SdeKind.VE else 1.0

    def prior_sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return self.prior_std * rng.standard_normal(shape)

    def prior_logp(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        d = z.shape[-1]
        var = self.prior_std**2
        return -0.5 * d * np.log(2 * np.pi * var) - 0.5 * np.sum(z * z, axis=-1) / var

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "t_max": self.t_max,
            "eps_train": self.eps_train,
            "eps_sample": self.eps_sample,
        }


def build_sde(kind, **params) -> SdeSpec:
    """Build an :class:`SdeSpec`, filling unspecified parameters with defaults.

    ``eps_sample`` defaults to 1e-5 for VE and 1e-3 for VP/SubVP.
    """
    kind = SdeKind.parse(kind)
    unknown = set(params) - set(DEFAULTS) - {"eps_sample"}
    if unknown:
        raise ParameterError(sorted(unknown)[0], "unknown SDE parameter")
    values = {k: params.get(k) if params.get(k) is not None else v for k, v in DEFAULTS.items()}
    eps_sample = params.get("eps_sample")
    if eps_sample is None:
        eps_sample = max(EPS_SAMPLE[kind], values["eps_train"])
    return SdeSpec(kind=kind, eps_sample=eps_sample, **values)


def sampling_grid(sde: SdeSpec, N: int, eps: Optional[float] = None) -> np.ndarray:
    """Uniform time grid ``t_0 = eps < ... < t_N = t_max`` for reverse-time samplers."""
    if int(N) < 1:
        raise ParameterError("N", "need at least one step")
    eps = sde.eps_sample if eps is None else float(eps)
    if not 0 <= eps < sde.t_max:
        raise ParameterError("eps_sample", f"must lie in [0, {sde.t_max})")
    return np.linspace(eps, sde.t_max, int(N) + 1)


def variance_trajectory(sde: SdeSpec, sigma0_sq: float, t):
    """Per-coordinate variance of ``x(t)`` for isotropic initial variance ``sigma0_sq``."""
    if sde.kind is SdeKind.VE:
        raise ValueError("variance_trajectory is defined for VP and SubVP; use perturbation_kernel for VE")
    if sigma0_sq < 0:
        raise ParameterError("sigma0_sq", "must be non-negative")
    ib = sde.integrated_beta(t)
    decay = np.exp(-ib)
    if sde.kind is SdeKind.VP:
        return 1.0 + decay * (sigma0_sq - 1.0)
    return 1.0 + np.exp(-2.0 * ib) + decay * (sigma0_sq - 2.0)


# -- discrete chains ---------------------------------------------------------


class ChainKind(str, enum.Enum):
    SMLD = "SMLD"
    DDPM = "DDPM"


@dataclass(frozen=True, eq=False)
class DiscreteSchedule:
    """Noise scales of an SMLD or DDPM chain, with the time each scale maps to.

    ``values`` holds sigma_1 < ... < sigma_N (SMLD) or beta_1..beta_N (DDPM).
    ``times`` is the continuous time a network is conditioned on for scale i.
    """

    kind: ChainKind
    values: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "kind", ChainKind(self.kind))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)
        if values.ndim != 1 or values.size == 0 or times.shape != values.shape:
            raise ParameterError("values", "need a non-empty 1-D schedule with one time per scale")
        if np.any(values <= 0):
            raise ParameterError("values", "noise scales must be positive")
        if self.kind is ChainKind.SMLD and np.any(np.diff(values) <= 0):
            raise ParameterError("values", "SMLD scales must be strictly increasing")
        if self.kind is ChainKind.DDPM and np.any(values >= 1):
            raise ParameterError("values", "DDPM betas must lie in (0, 1)")

    @property
    def N(self) -> int:
        return self.values.size

    @property
    def alphas(self) -> np.ndarray:
        if self.kind is not ChainKind.DDPM:
            raise AttributeError("alphas are defined for DDPM schedules only")
        return np.exp(self.log_alphas)

    @property
    def log_alphas(self) -> np.ndarray:
        if self.kind is not ChainKind.DDPM:
            raise AttributeError("alphas are defined for DDPM schedules only")
        return np.cumsum(np.log1p(-self.values))

    def kernel(self):
        """Mean coefficients and stds of ``x_i | x_0`` for i = 1..N."""
        if self.kind is ChainKind.SMLD:
            return np.ones(self.N), self.values.copy()
        log_a = self.log_alphas
        return np.exp(0.5 * log_a), np.sqrt(one_minus_exp_neg(-log_a))

    def nearest_index(self, t) -> np.ndarray:
        """0-based index of the scale whose time is closest to ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t)
        idx = np.clip(idx, 1, self.N - 1) if self.N > 1 else np.zeros_like(idx)
        if self.N > 1:
            left = self.times[idx - 1]
            right = self.times[idx]
            idx = np.where(np.abs(t - left) <= np.abs(right - t), idx - 1, idx)
        return idx


def smld_schedule(N: int, sigma_min: float = 0.01, sigma_max: float = 50.0) -> DiscreteSchedule:
    """Geometric scales ``sigma_i = sigma_min (sigma_max/sigma_min)^((i-1)/(N-1))``.

    Scale i is conditioned on time ``(i-1)/(N-1)``, where the VE sigma(t)
    equals sigma_i exactly. A single scale sits at ``sigma_max``, time 1.
    """
    if N < 1:
        raise ParameterError("N", "must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ParameterError("sigma_max", "need 0 < sigma_min < sigma_max")
    frac = np.ones(1) if N == 1 else np.arange(N) / (N - 1)
    return DiscreteSchedule(ChainKind.SMLD, sigma_min * (sigma_max / sigma_min) ** frac, frac)


def ddpm_schedule(N: int, beta_min: float = 0.1, beta_max: float = 20.0) -> DiscreteSchedule:
    """Arithmetic ``beta_i = beta_min/N + (i-1)(beta_max - beta_min)/(N(N-1))``.

    Scale i is conditioned on time ``i/N``.
    """
    if N < 1:
        raise ParameterError("N", "must be >= 1")
    if not 0 < beta_min < beta_max:
        raise ParameterError("beta_max", "need 0 < beta_min < beta_max")
    i = np.arange(1, N + 1)
    frac = np.zeros(N) if N == 1 else (i - 1) / (N * (N - 1))
    betas = beta_min / N + frac * (beta_max - beta_min)
    return DiscreteSchedule(ChainKind.DDPM, betas, i / N)


def schedule_for(sde: SdeSpec, N: int) -> DiscreteSchedule:
    """The discrete chain an SDE generalizes (SMLD for VE, DDPM for VP)."""
    if sde.kind is SdeKind.VE:
        return smld_schedule(N, sde.sigma_min, sde.sigma_max)
    if sde.kind is SdeKind.VP:
        return ddpm_schedule(N, sde.beta_min, sde.beta_max)
    raise ValueError("SubVP SDEs have no discrete-chain counterpart")


def simulate_discrete_chain(schedule: DiscreteSchedule, x0, rng: np.random.Generator, final_only: bool = False):
    """Run the forward chain from ``x0``.

    Returns the states ``x_1..x_N`` stacked along a new leading axis, or only
    ``x_N`` when ``final_only`` is set (useful for large batches).
    """
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    states = None if final_only else np.empty((schedule.N,) + x.shape)
    prev_sq = 0.0
    for i, v in enumerate(schedule.values):
        z = rng.standard_normal(x.shape)
        if schedule.kind is ChainKind.SMLD:
            x = x + np.sqrt(v * v - prev_sq) * z
            prev_sq = v * v
        else:
            x = np.sqrt(1.0 - v) * x + np.sqrt(v) * z
        if states is not None:
            states[i] = x
    return x if final_only else states


@dataclass(frozen=True, eq=False)
class KernelMatchReport:
    """Discrete vs continuous perturbation kernels at matched times ``t_i = i/N``.

    ``max_rel_*`` are sup-norm relative deviations ``max|d - c| / max|c|``;
    ``max_pointwise_rel_*`` are ``max |d - c| / |c|`` and are dominated by the
    first few scales, where both stds are tiny.
    """

    t: np.ndarray
    discrete_std: np.ndarray
    continuous_std: np.ndarray
    discrete_mean_coeff: np.ndarray
    continuous_mean_coeff: np.ndarray

    COLUMNS = ("t", "discrete_std", "continuous_std", "discrete_mean_coeff", "continuous_mean_coeff")

    @staticmethod
    def _sup_rel(d, c):
        return float(np.max(np.abs(d - c)) / np.max(np.abs(c)))

    @property
    def max_rel_std(self) -> float:
        return self._sup_rel(self.discrete_std, self.continuous_std)

    @property
    def max_rel_mean_coeff(self) -> float:
        return self._sup_rel(self.discrete_mean_coeff, self.continuous_mean_coeff)

    @property
    def max_pointwise_rel_std(self) -> float:
        return float(np.max(np.abs(self.discrete_std - self.continuous_std) / self.continuous_std))

    @property
    def max_pointwise_rel_mean_coeff(self) -> float:
        c = self.continuous_mean_coeff
        return float(np.max(np.abs(self.discrete_mean_coeff - c) / c))

    def rows(self):
        return list(zip(*(getattr(self, c) for c in self.COLUMNS)))

    def summary(self) -> dict:
        return {
            "N": int(self.t.size),
            "max_rel_std": self.max_rel_std,
            "max_rel_mean_coeff": self.max_rel_mean_coeff,
            "max_pointwise_rel_std": self.max_pointwise_rel_std,
            "max_pointwise_rel_mean_coeff": self.max_pointwise_rel_mean_coeff,
        }


def kernel_match_report(sde: SdeSpec, N: int) -> KernelMatchReport:
    if N < 2:
        raise ParameterError("N", "kernel match needs N >= 2")
    schedule = schedule_for(sde, N)
    t = np.arange(1, N + 1) / N * sde.t_max
    d_mean, d_std = schedule.kernel()
    c_mean, c_std = sde.perturbation_kernel(t)
    return KernelMatchReport(t, d_std, c_std, d_mean, np.broadcast_to(c_mean, t.shape).copy())
