"""Reverse-time samplers: predictors, Langevin correctors and PC sampling.

All discrete rules are written in terms of the one-step forward transition
``x(t_i) -> x(t_{i+1})``, which for every SDE here is ``a x + sqrt(v) z``.
With ``(a, v)`` from the closed-form transition kernel:

* VE gives ``a = 1`` and ``v = sigma_{i+1}^2 - sigma_i^2``.
* VP gives ``a = sqrt(1 - beta_{i+1})`` and ``v = beta_{i+1}``, with
  ``beta_{i+1} = 1 - exp(-int beta)`` over the step. This keeps the products
  of ``1 - beta`` on the grid equal to the continuous ``m(t)^2``.

Chains are processed in fixed-size blocks. Each block draws from its own
counter-based Philox stream keyed by ``(seed, block index)``, so the output
depends only on the configuration and seed, never on the thread count.
"""

from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .flow import prob_flow_step
from .mixture import call_score, tweedie_denoise
from .sde import ParameterError, SdeKind, SdeSpec, sampling_grid

log = logging.getLogger(__name__)

BLOCK_SIZE = 8192
DEFAULT_SNR = {SdeKind.VE: 0.16, SdeKind.VP: 0.01, SdeKind.SUBVP: 0.01}
_SMALL_BATCH = 8


class Predictor(str, enum.Enum):
    EULER_MARUYAMA = "EULER_MARUYAMA"
    REVERSE_DIFFUSION = "REVERSE_DIFFUSION"
    ANCESTRAL = "ANCESTRAL"
    PROB_FLOW = "PROB_FLOW"
    NONE = "NONE"


class Corrector(str, enum.Enum):
    LANGEVIN = "LANGEVIN"
    NONE = "NONE"


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PcConfig:
    """Predictor-corrector configuration.

    ``snr`` and ``eps_sample`` default to per-SDE values when left as None.
    """

    predictor: Predictor = Predictor.REVERSE_DIFFUSION
    corrector: Corrector = Corrector.LANGEVIN
    N: int = 1000
    M: int = 1
    snr: Optional[float] = None
    denoise: bool = True
    eps_sample: Optional[float] = None
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predictor", Predictor(self.predictor))
        object.__setattr__(self, "corrector", Corrector(self.corrector))
        if int(self.N) < 1:
            raise ParameterError("N", "need at least one step")
        if int(self.M) < 0:
            raise ParameterError("M", "must be non-negative")
        if int(self.n) < 1:
            raise ParameterError("n", "need at least one sample")
        if self.snr is not None and not self.snr > 0:
            raise ParameterError("snr", "must be positive")
        if self.predictor is Predictor.NONE and (self.corrector is Corrector.NONE or self.M == 0):
            raise ParameterError("predictor", "predictor NONE needs a LANGEVIN corrector with M > 0")

    def check(self, sde: SdeSpec) -> None:
        if self.predictor is Predictor.ANCESTRAL and sde.kind is SdeKind.SUBVP:
            raise ParameterError("predictor", "no ancestral rule is defined for the SubVP SDE")
        if self.eps_sample is not None and not 0 <= self.eps_sample < sde.t_max:
            raise ParameterError("eps_sample", f"must lie in [0, {sde.t_max})")

    def resolved(self, sde: SdeSpec) -> "PcConfig":
        """Copy with SDE-dependent defaults filled in."""
        self.check(sde)
        snr = DEFAULT_SNR[sde.kind] if self.snr is None else self.snr
        eps = sde.eps_sample if self.eps_sample is None else self.eps_sample
        return PcConfig(self.predictor, self.corrector, self.N, self.M, snr, self.denoise, eps, self.n, self.seed)

    def score_evals_per_sample(self) -> int:
        steps = 0 if self.predictor is Predictor.NONE else self.N
        if self.corrector is Corrector.LANGEVIN:
            steps += self.N * self.M
        return steps + int(self.denoise)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor"] = self.predictor.value
        d["corrector"] = self.corrector.value
        return d


@dataclass
class SampleBatch:
    samples: np.ndarray
    seed: int
    config: dict
    nfe: int
    trajectory: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None


def block_rng(seed: int, block: int, tag: int = 0) -> np.random.Generator:
    """Counter-based stream for one block of chains."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(tag), int(block)])))


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SDELAB_THREADS", "1")))
    except ValueError:
        return 1


def run_blocks(n: int, fn: Callable[[int, int], np.ndarray], block_size: int = BLOCK_SIZE) -> list:
    """Apply ``fn(block_index, block_len)`` over fixed blocks covering ``n`` chains."""
    sizes = [min(block_size, n - k) for k in range(0, n, block_size)]
    jobs = list(enumerate(sizes))
    threads = min(thread_count(), len(jobs))
    if threads <= 1:
        return [fn(b, s) for b, s in jobs]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


# -- predictors ----------------------------------------------------------------


def step_coefficients(sde: SdeSpec, t_lo, t_hi):
    """Forward one-step transition ``x(t_hi) = a x(t_lo) + sqrt(v) z`` as ``(a, v)``."""
    return sde.transition_kernel(t_lo, t_hi)


def predictor_step(kind, x, i: int, grid, score_fn, sde: SdeSpec, rng: np.random.Generator) -> np.ndarray:
    """Move ``x`` from ``grid[i + 1]`` to ``grid[i]``."""
    kind = Predictor(kind)
    if kind is Predictor.NONE:
        return x
    if kind is Predictor.PROB_FLOW:
        return prob_flow_step(x, i, grid, score_fn, sde, rng)
    t_hi, t_lo = grid[i + 1], grid[i]
    score = call_score(score_fn, x, t_hi, rng)
    z = rng.standard_normal(x.shape)
    if kind is Predictor.EULER_MARUYAMA:
        dt = t_hi - t_lo
        g = sde.diffusion(t_hi)
        return x - (sde.drift(x, t_hi) - g * g * score) * dt + g * np.sqrt(dt) * z
    a, v = step_coefficients(sde, t_lo, t_hi)
    if kind is Predictor.REVERSE_DIFFUSION:
        return (2.0 - a) * x + v * score + np.sqrt(v) * z
    # ancestral
    if sde.kind is SdeKind.VP:
        beta = v
        return (x + beta * score) / np.sqrt(1.0 - beta) + np.sqrt(beta) * z
    if sde.kind is SdeKind.VE:
        s_hi2, s_lo2 = sde.sigma(t_hi) ** 2, sde.sigma(t_lo) ** 2
        return x + (s_hi2 - s_lo2) * score + np.sqrt(s_lo2 * (s_hi2 - s_lo2) / s_hi2) * z
    raise ParameterError("predictor", f"no ancestral rule for the {sde.kind.value} SDE")


# -- corrector -----------------------------------------------------------------


def langevin_step_size(grad_norm, noise_norm, snr: float, alpha) -> float:
    """``eps = 2 alpha (r ||z|| / ||g||)^2``."""
    return 2.0 * alpha * (snr * noise_norm / grad_norm) ** 2


def corrector_alpha(sde: SdeSpec, t) -> float:
    if sde.kind is SdeKind.VE:
        return 1.0
    m, _ = sde.perturbation_kernel(t)
    return float(m * m)


def corrector_step(x, t, score_fn, sde: SdeSpec, snr: float, rng: np.random.Generator) -> np.ndarray:
    """One Langevin step at fixed ``t`` with the signal-to-noise step-size rule.

    Norms are averaged over the rows of ``x``; with fewer than 8 rows the
    noise norm is replaced by ``sqrt(d)``.
    """
    if not snr > 0:
        raise ParameterError("snr", "must be positive")
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    g = np.atleast_2d(call_score(score_fn, x, t, rng))
    z = rng.standard_normal(X.shape)
    grad_norm = np.mean(np.linalg.norm(g, axis=1))
    if X.shape[0] < _SMALL_BATCH:
        noise_norm = np.sqrt(X.shape[1])
    else:
        noise_norm = np.mean(np.linalg.norm(z, axis=1))
    if grad_norm == 0:
        log.info("corrector step skipped at t=%g: zero score norm", t)
        return x
    eps = langevin_step_size(grad_norm, noise_norm, snr, corrector_alpha(sde, t))
    return (X + eps * g + np.sqrt(2.0 * eps) * z).reshape(x.shape)


# -- PC sampling ---------------------------------------------------------------


def _run_chain_block(sde, score_fn, cfg: PcConfig, grid, rng, n, dim, project, keep_trajectory, x_init):
    x = sde.prior_sample(rng, (n, dim)) if x_init is None else np.array(x_init, dtype=float)
    traj = [x.copy()] if keep_trajectory else None
    correct = cfg.corrector is Corrector.LANGEVIN and cfg.M > 0
    for i in range(cfg.N - 1, -1, -1):
        if project is not None:
            x = project(x, grid[i + 1], rng)
        x = predictor_step(cfg.predictor, x, i, grid, score_fn, sde, rng)
        if correct:
            for _ in range(cfg.M):
                if project is not None:
                    x = project(x, grid[i], rng)
                x = corrector_step(x, grid[i], score_fn, sde, cfg.snr, rng)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after step {cfg.N - i} of {cfg.N} (t={grid[i]:.6g})")
        if keep_trajectory:
            traj.append(x.copy())
    if cfg.denoise:
        if project is not None:
            x = project(x, grid[0], rng)
        x = tweedie_denoise(x, grid[0], score_fn, sde, rng)
    return x, (np.stack(traj) if keep_trajectory else None)


def pc_sample(
    sde: SdeSpec,
    score_fn,
    cfg: PcConfig,
    project: Optional[Callable] = None,
    finalize: Optional[Callable] = None,
    keep_trajectory: bool = False,
    x_init: Optional[np.ndarray] = None,
    dim: Optional[int] = None,
) -> SampleBatch:
    """Predictor-corrector sampling from the prior down to ``eps_sample``.

    Args:
        sde: The forward SDE.
        score_fn: :class:`ScoreFunction` or plain ``f(x, t)``.
        cfg: Sampler configuration; ``cfg.seed`` keys the random streams.
        project: Optional ``project(x, t, rng) -> x`` applied before every
            predictor, corrector and denoising step (used for imputation).
        finalize: Optional ``finalize(x, rng) -> x`` applied to each block at
            the end.
        keep_trajectory: Also return the state after every predictor step.
        x_init: Start from these states instead of prior draws.
        dim: Data dimension when ``score_fn`` does not carry one.
    """
    cfg = cfg.resolved(sde)
    dim = dim or getattr(score_fn, "dim", None)
    if x_init is not None:
        x_init = np.atleast_2d(np.asarray(x_init, dtype=float))
        if x_init.shape[0] != cfg.n:
            raise ParameterError("x_init", f"need {cfg.n} initial states, got {x_init.shape[0]}")
        dim = x_init.shape[1]
    if dim is None:
        raise ParameterError("dim", "cannot infer the data dimension")
    grid = sampling_grid(sde, cfg.N, cfg.eps_sample)

    def block(b, size):
        rng = block_rng(cfg.seed, b)
        start = b * BLOCK_SIZE
        init = None if x_init is None else x_init[start : start + size]
        x, traj = _run_chain_block(sde, score_fn, cfg, grid, rng, size, dim, project, keep_trajectory, init)
        if finalize is not None:
            x = finalize(x, rng)
        return x, traj

    parts = run_blocks(cfg.n, block)
    samples = np.concatenate([p[0] for p in parts])
    traj = np.concatenate([p[1] for p in parts], axis=1) if keep_trajectory else None
    return SampleBatch(
        samples=samples,
        seed=cfg.seed,
        config=cfg.to_dict(),
        nfe=cfg.score_evals_per_sample(),
        trajectory=traj,
        times=grid[::-1].copy() if keep_trajectory else None,
    )


def ancestral_vs_reverse_deviation(sde: SdeSpec, score_fn, x, N: int, seed: int = 0) -> np.ndarray:
    """Per-step max |ancestral - reverse diffusion| from shared states and noise.

    Both rules are applied to the same state and the same Gaussian draw at
    every step; the reverse-diffusion output carries the trajectory forward.
    """
    if sde.kind is not SdeKind.VP:
        raise ParameterError("sde", "the comparison is defined for the VP SDE")
    grid = sampling_grid(sde, N)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = block_rng(seed, 0)
    out = np.empty(N)
    for k, i in enumerate(range(N - 1, -1, -1)):
        state = rng.bit_generator.state
        rev = predictor_step(Predictor.REVERSE_DIFFUSION, x, i, grid, score_fn, sde, rng)
        rng.bit_generator.state = state
        anc = predictor_step(Predictor.ANCESTRAL, x, i, grid, score_fn, sde, rng)
        out[k] = np.max(np.abs(rev - anc))
        x = rev
    return out
