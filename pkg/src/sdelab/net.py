"""Small time-conditioned MLP score network with hand-written gradients.

The network maps ``(x, t)`` to a d-vector. Time enters through fixed random
Fourier features ``[sin(2 pi w t), cos(2 pi w t)]`` with ``w ~ N(0, scale^2)``.
All trainable weights live in one flat vector so the optimizer, gradient
checks and checkpoints see a single array; layers are views into it.

When an SDE is attached the raw output is divided by the kernel std ``s(t)``.
The network then predicts ``-z``-like quantities of unit scale instead of
scores that blow up as ``t -> 0``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .mixture import ScoreFunction
from .sde import ChainKind, DiscreteSchedule, ParameterError, SdeSpec, build_sde

CHECKPOINT_FORMAT = "sdelab-mlp"
CHECKPOINT_VERSION = 1


def _silu(a):
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))
    return a * sig, sig


def _silu_grad(a, sig):
    return sig * (1.0 + a * (1.0 - sig))


class MlpScoreNet:
    """Fully connected score model ``s_theta(x, t)``.

    Args:
        dim: Data dimension d.
        hidden: Hidden layer widths. An empty tuple gives a linear readout of
            ``[x, embed(t)]``.
        embed_dim: Width of the Fourier time embedding (even, or 0 for none).
        fourier_scale: Std of the fixed Fourier frequencies.
        sde: If given, outputs are divided by ``s(t)`` of this SDE.
        seed: Seed for frequencies and initial weights.
        zero_head: Initialize the output layer to zero.
    """

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (64, 64),
        embed_dim: int = 32,
        fourier_scale: float = 16.0,
        sde: Optional[SdeSpec] = None,
        seed: int = 0,
        zero_head: bool = False,
    ):
        if dim < 1:
            raise ParameterError("dim", "must be a positive integer")
        if embed_dim < 0 or embed_dim % 2:
            raise ParameterError("embed_dim", "must be a non-negative even integer")
        if any(int(h) < 1 for h in hidden):
            raise ParameterError("hidden", "layer widths must be positive")
        if not fourier_scale > 0:
            raise ParameterError("fourier_scale", "must be positive")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = int(embed_dim)
        self.fourier_scale = float(fourier_scale)
        self.sde = sde
        rng = np.random.default_rng(seed)
        self.freqs = rng.normal(0.0, self.fourier_scale, self.embed_dim // 2)

        widths = [self.dim + self.embed_dim, *self.hidden, self.dim]
        self.shapes = [(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.params = np.zeros(sum(a * b + b for a, b in self.shapes))
        for i, (W, _) in enumerate(self.layers()):
            fan_in = W.shape[0]
            if zero_head and i == len(self.shapes) - 1:
                continue
            W[...] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), W.shape)

    # -- parameters ------------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.params.size

    def layers(self, flat: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat`` (default: the live parameter vector)."""
        flat = self.params if flat is None else flat
        out, k = [], 0
        for a, b in self.shapes:
            W = flat[k : k + a * b].reshape(a, b)
            k += a * b
            out.append((W, flat[k : k + b]))
            k += b
        return out

    def copy(self) -> "MlpScoreNet":
        other = object.__new__(MlpScoreNet)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        other.freqs = self.freqs.copy()
        return other

    # -- forward / backward ------------------------------------------------------

    def embed(self, t, batch: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
        arg = 2.0 * np.pi * t[:, None] * self.freqs
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def output_scale(self, t, batch: int) -> np.ndarray:
        if self.sde is None:
            return np.ones((batch, 1))
        # clamp so schedules that start at t = 0 still get a finite scale
        t = np.maximum(np.broadcast_to(np.asarray(t, dtype=float), (batch,)), self.sde.eps_train)
        _, s = self.sde.perturbation_kernel(t)
        return 1.0 / s[:, None]

    def forward(self, x, t, cache: bool = False):
        """Evaluate the network on ``x`` of shape ``(B, d)`` or ``(d,)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if x.shape[-1] != self.dim:
            raise ValueError(f"network expects dim {self.dim}, got input of shape {x.shape}")
        X = x.reshape(-1, self.dim)
        B = X.shape[0]
        h = np.concatenate([X, self.embed(t, B)], axis=1) if self.embed_dim else X
        acts = []
        layers = self.layers()
        for W, b in layers[:-1]:
            a = h @ W + b
            nxt, sig = _silu(a)
            acts.append((h, a, sig))
            h = nxt
        W, b = layers[-1]
        scale = self.output_scale(t, B)
        out = (h @ W + b) * scale
        if single:
            out = out[0]
        if cache:
            return out, (acts, h, scale, single)
        return out

    def backward(self, grad_out, cache) -> np.ndarray:
        """Parameter gradient for upstream gradient ``grad_out`` of the output."""
        acts, h_last, scale, single = cache
        g = np.asarray(grad_out, dtype=float).reshape(-1, self.dim) * scale
        grad = np.zeros_like(self.params)
        glayers = self.layers(grad)
        layers = self.layers()
        gW, gb = glayers[-1]
        gW[...] = h_last.T @ g
        gb[...] = g.sum(0)
        dh = g @ layers[-1][0].T
        for i in range(len(acts) - 1, -1, -1):
            h_in, a, sig = acts[i]
            da = dh * _silu_grad(a, sig)
            gW, gb = glayers[i]
            gW[...] = h_in.T @ da
            gb[...] = da.sum(0)
            if i:
                dh = da @ layers[i][0].T
        return grad

    def __call__(self, x, t):
        return self.forward(x, t)

    def score_fn(self) -> ScoreFunction:
        return ScoreFunction(self.forward, self.dim, source="network")

    # -- checkpoints -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "embed_dim": self.embed_dim,
            "fourier_scale": self.fourier_scale,
            "activation": "silu",
            "sde": None if self.sde is None else self.sde.to_dict(),
            "freqs": self.freqs.tolist(),
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpScoreNet":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint header {data.get('format')!r} v{data.get('version')!r}")
        sde = None
        if data["sde"] is not None:
            sde_params = dict(data["sde"])
            sde = build_sde(sde_params.pop("kind"), **sde_params)
        net = cls(data["dim"], data["hidden"], data["embed_dim"], data["fourier_scale"], sde=sde)
        params = np.asarray(data["params"], dtype=float)
        if params.shape != net.params.shape:
            raise ValueError(f"checkpoint has {params.size} parameters, architecture needs {net.n_params}")
        net.params[...] = params
        net.freqs = np.asarray(data["freqs"], dtype=float)
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MlpScoreNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class DiscreteIndexScore(ScoreFunction):
    """Adapt a net trained on a discrete schedule to continuous time.

    ``t`` is snapped to the nearest schedule time before evaluating the net.
    """

    def __init__(self, net: MlpScoreNet, schedule: DiscreteSchedule):
        self.net = net
        self.schedule = schedule
        super().__init__(self._eval, net.dim, source="network")

    def _eval(self, x, t):
        idx = self.schedule.nearest_index(t)
        return self.net.forward(x, self.schedule.times[idx])


# -- objectives ----------------------------------------------------------------


class Objective(str, enum.Enum):
    DSM_CONT = "DSM_CONT"
    SMLD_DISCRETE = "SMLD_DISCRETE"
    DDPM_DISCRETE = "DDPM_DISCRETE"
    SSM = "SSM"


def _regression(net, x, t, w, z):
    """Mean of ``||w s_theta(x, t) + z||^2`` and its parameter gradient."""
    out, cache = net.forward(x, t, cache=True)
    resid = w * out + z
    B = x.shape[0]
    loss = float(np.sum(resid * resid) / B)
    return loss, net.backward(2.0 * w * resid / B, cache)


def dsm_objective(net: MlpScoreNet, x0, t, z, sde: SdeSpec):
    """Continuous DSM loss with ``lambda(t) = s(t)^2`` for fixed ``t`` and ``z``.

    Per sample this is ``||s(t) s_theta(x_t, t) + z||^2`` with
    ``x_t = m(t) x0 + s(t) z``.
    """
    x0, z = np.atleast_2d(x0), np.atleast_2d(z)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x0.shape[0],))
    m, s = sde.perturbation_kernel(t)
    x = m[:, None] * x0 + s[:, None] * z
    return _regression(net, x, t, s[:, None], z)


def dsm_loss_continuous(net: MlpScoreNet, x0_batch, sde: SdeSpec, rng: np.random.Generator, t=None):
    """Stochastic DSM loss: ``t ~ U[eps_train, t_max]`` and ``z ~ N(0, I)``.

    Passing ``t`` (scalar or per-sample) replaces the uniform draw.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    if t is None:
        t = rng.uniform(sde.eps_train, sde.t_max, B)
    z = rng.standard_normal(x0.shape)
    return dsm_objective(net, x0, t, z, sde)


def discrete_objective(net: MlpScoreNet, x0, schedule: DiscreteSchedule, idx, z):
    """Discrete SMLD or DDPM loss for fixed scale indices and noise.

    SMLD uses weight ``sigma_i^2`` and ``x~ = x0 + sigma_i z``; DDPM uses
    weight ``1 - alpha_i`` and ``x~ = sqrt(alpha_i) x0 + sqrt(1 - alpha_i) z``.
    Both reduce to ``||std_i s_theta(x~, t_i) + z||^2``.
    """
    x0, z = np.atleast_2d(x0), np.atleast_2d(z)
    idx = np.broadcast_to(np.asarray(idx), (x0.shape[0],))
    coeff, std = schedule.kernel()
    x = coeff[idx, None] * x0 + std[idx, None] * z
    return _regression(net, x, schedule.times[idx], std[idx, None], z)


def discrete_loss(net: MlpScoreNet, x0_batch, schedule: DiscreteSchedule, rng: np.random.Generator, objective=None):
    """Stochastic discrete objective: one uniformly drawn scale per sample."""
    if objective is not None:
        want = {Objective.SMLD_DISCRETE: ChainKind.SMLD, Objective.DDPM_DISCRETE: ChainKind.DDPM}.get(Objective(objective))
        if want is not schedule.kind:
            raise ParameterError("schedule", f"{objective} needs a {want} schedule, got {schedule.kind.value}")
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    idx = rng.integers(0, schedule.N, x0.shape[0])
    z = rng.standard_normal(x0.shape)
    return discrete_objective(net, x0, schedule, idx, z)


def probe_vectors(rng: np.random.Generator, shape, kind: str = "rademacher") -> np.ndarray:
    """Zero-mean, identity-covariance probes for trace estimation."""
    if kind == "rademacher":
        return rng.integers(0, 2, shape) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ParameterError("probe", f"unknown probe distribution {kind!r}")


def directional_jacobian(fn: Callable, x, v, h: float = 1e-4) -> np.ndarray:
    """``v^T (d fn / dx) v`` per row by central difference along ``v``."""
    return np.sum(v * (fn(x + h * v) - fn(x - h * v)), axis=-1) / (2.0 * h)


def ssm_objective(net: MlpScoreNet, x, t, v, weight, h: float = 1e-4):
    """Sliced score matching on already-perturbed samples ``x``.

    Per sample: ``weight * (0.5 ||s_theta||^2 + v^T J v)`` with the directional
    derivative from a central difference of step ``h``.
    """
    x, v = np.atleast_2d(x), np.atleast_2d(v)
    B = x.shape[0]
    w = np.broadcast_to(np.asarray(weight, dtype=float), (B,))[:, None]
    out, c0 = net.forward(x, t, cache=True)
    plus, c1 = net.forward(x + h * v, t, cache=True)
    minus, c2 = net.forward(x - h * v, t, cache=True)
    quad = np.sum(v * (plus - minus), axis=1, keepdims=True) / (2.0 * h)
    loss = float(np.sum(w * (0.5 * np.sum(out * out, axis=1, keepdims=True) + quad)) / B)
    grad = net.backward(w * out / B, c0)
    grad += net.backward(w * v / (2.0 * h * B), c1)
    grad -= net.backward(w * v / (2.0 * h * B), c2)
    return loss, grad


def ssm_loss(net: MlpScoreNet, x0_batch, sde: SdeSpec, rng: np.random.Generator, probe: str = "rademacher", h: float = 1e-4):
    """Stochastic SSM loss on ``x_t`` with ``lambda(t) = s(t)^2``."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    B = x0.shape[0]
    t = rng.uniform(sde.eps_train, sde.t_max, B)
    m, s = sde.perturbation_kernel(t)
    x = m[:, None] * x0 + s[:, None] * rng.standard_normal(x0.shape)
    v = probe_vectors(rng, x0.shape, probe)
    return ssm_objective(net, x, t, v, s * s, h)


# -- training ------------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: Objective = Objective.DSM_CONT
    iterations: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    sde: Optional[SdeSpec] = None
    schedule: Optional[DiscreteSchedule] = None
    probe: str = "rademacher"
    h: float = 1e-4
    log_every: int = 100
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.objective = Objective(self.objective)
        for name in ("iterations", "batch_size", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(name, "must be a positive integer")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ParameterError("lr", "must be a finite non-negative number")
        if not 1e-5 <= self.h <= 1e-2:
            raise ParameterError("h", "must lie in [1e-5, 1e-2]")
        if self.objective in (Objective.DSM_CONT, Objective.SSM) and self.sde is None:
            raise ParameterError("sde", f"{self.objective.value} needs an SDE")
        if self.objective in (Objective.SMLD_DISCRETE, Objective.DDPM_DISCRETE):
            if self.schedule is None:
                raise ParameterError("schedule", f"{self.objective.value} needs a discrete schedule")
            want = ChainKind.SMLD if self.objective is Objective.SMLD_DISCRETE else ChainKind.DDPM
            if self.schedule.kind is not want:
                raise ParameterError("schedule", f"{self.objective.value} needs a {want.value} schedule")
        if self.probe not in ("rademacher", "gaussian"):
            raise ParameterError("probe", f"unknown probe distribution {self.probe!r}")


@dataclass
class TrainResult:
    net: MlpScoreNet
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)


def loss_and_grad(net: MlpScoreNet, x0, config: TrainConfig, rng: np.random.Generator):
    obj = config.objective
    if obj is Objective.DSM_CONT:
        return dsm_loss_continuous(net, x0, config.sde, rng)
    if obj is Objective.SSM:
        return ssm_loss(net, x0, config.sde, rng, config.probe, config.h)
    return discrete_loss(net, x0, config.schedule, rng)


def train(net: MlpScoreNet, data_sampler: Callable, config: TrainConfig) -> TrainResult:
    """Adam on the configured objective; updates ``net`` in place.

    ``data_sampler(n, rng)`` returns ``n`` data points. The logged loss is the
    mean over each window of ``log_every`` iterations.
    """
    rng = np.random.default_rng(config.seed)
    b1, b2 = config.betas
    m1 = np.zeros_like(net.params)
    m2 = np.zeros_like(net.params)
    result = TrainResult(net)
    window = 0.0
    for it in range(1, config.iterations + 1):
        x0 = data_sampler(config.batch_size, rng)
        loss, grad = loss_and_grad(net, x0, config, rng)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite loss {loss} or gradient at iteration {it} ({config.objective.value})")
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        step = config.lr * (m1 / (1 - b1**it)) / (np.sqrt(m2 / (1 - b2**it)) + config.adam_eps)
        net.params -= step
        window += loss
        if it % config.log_every == 0:
            result.steps.append(it)
            result.losses.append(window / config.log_every)
            window = 0.0
    if not np.all(np.isfinite(net.params)):
        raise TrainingError("parameters became non-finite")
    return result


def oracle_mse(score_fn, oracle_fn, dim: int = 2, times=(0.1, 0.5, 0.9), grid: int = 32, extent: float = 4.0):
    """Mean squared score error on a regular grid, and the mean squared oracle norm.

    Returns ``(mse, ref)`` so that ``mse / ref`` is the relative error.
    """
    if dim != 2:
        raise ValueError("oracle_mse evaluates on a 2-D grid")
    axis = np.linspace(-extent, extent, grid)
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    err = ref = 0.0
    for t in times:
        want = oracle_fn(pts, t)
        got = score_fn(pts, t)
        err += np.mean(np.sum((got - want) ** 2, axis=1))
        ref += np.mean(np.sum(want * want, axis=1))
    return err / len(times), ref / len(times)
