"""Sample-quality metrics against analytic references."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate, stats
from scipy.special import kolmogorov

_CHUNK = 2048
_MEDIAN_SUBSAMPLE = 1000


def moments(samples):
    """Sample mean and unbiased covariance of ``(n, d)`` samples."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("moments need at least two samples")
    mean = x.mean(axis=0)
    c = x - mean
    return mean, c.T @ c / (x.shape[0] - 1)


def _rows(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _sq_dists(a, b):
    return np.maximum(np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T, 0.0)


def median_bandwidth(a, b) -> float:
    """Median pairwise distance of the pooled samples (first 1000 of each set)."""
    pool = np.concatenate([_rows(a)[:_MEDIAN_SUBSAMPLE], _rows(b)[:_MEDIAN_SUBSAMPLE]])
    d = np.sqrt(_sq_dists(pool, pool))
    med = float(np.median(d[np.triu_indices(pool.shape[0], 1)]))
    return med if med > 0 else 1.0


def _kernel_sum(a, b, gamma, exclude_diag: bool) -> float:
    total = 0.0
    for i in range(0, a.shape[0], _CHUNK):
        k = np.exp(-gamma * _sq_dists(a[i : i + _CHUNK], b))
        if exclude_diag:
            j = np.arange(k.shape[0])
            k[j, i + j] = 0.0
        total += float(k.sum())
    return total


def _self_kernel_sum(a, gamma) -> float:
    """Off-diagonal sum of ``k(a_i, a_j)`` using symmetry."""
    total = 0.0
    for i in range(0, a.shape[0], _CHUNK):
        blk = a[i : i + _CHUNK]
        k = np.exp(-gamma * _sq_dists(blk, a[i:]))
        total += 2.0 * float(np.triu(k[:, : blk.shape[0]], 1).sum()) + 2.0 * float(k[:, blk.shape[0] :].sum())
    return total


def mmd_rbf(samples_a, samples_b, bandwidth: Optional[float] = None, unbiased: bool = True, floor: bool = False) -> float:
    """Squared MMD with kernel ``exp(-||x - y||^2 / (2 h^2))``.

    The unbiased U-statistic can dip slightly below zero when the
    distributions agree; ``floor=True`` clips it at zero. ``bandwidth=None``
    uses the median heuristic.
    """
    a, b = _rows(samples_a), _rows(samples_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    gamma = 0.5 / (h * h)
    n, m = a.shape[0], b.shape[0]
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("the unbiased estimator needs at least two samples per set")
        kaa = _self_kernel_sum(a, gamma) / (n * (n - 1))
        kbb = _self_kernel_sum(b, gamma) / (m * (m - 1))
    else:
        kaa = _kernel_sum(a, a, gamma, False) / (n * n)
        kbb = _kernel_sum(b, b, gamma, False) / (m * m)
    kab = _kernel_sum(a, b, gamma, False) / (n * m)
    value = kaa + kbb - 2.0 * kab
    return max(value, 0.0) if floor else value


def mmd_rbf_mixture(samples, gmm, bandwidth: float) -> float:
    """Unbiased squared MMD between samples and a diagonal Gaussian mixture.

    The mixture terms of the RBF kernel expectation are Gaussian integrals,
    so only the sample-sample term is estimated. This is the same population
    quantity as :func:`mmd_rbf` against mixture draws, with less variance.
    """
    x = _rows(samples)
    if x.shape[1] != gmm.dim:
        raise ValueError("sample dimension does not match the mixture")
    n = x.shape[0]
    if n < 2:
        raise ValueError("the unbiased estimator needs at least two samples")
    h2 = float(bandwidth) ** 2
    if not h2 > 0:
        raise ValueError("bandwidth must be positive")
    w, mu, var = gmm.weights, gmm.means, gmm.variances
    kxx = _self_kernel_sum(x, 0.5 / h2) / (n * (n - 1))
    s = h2 + var[:, None, :] + var[None, :, :]
    pair = np.prod(np.sqrt(h2 / s) * np.exp(-0.5 * (mu[:, None, :] - mu[None, :, :]) ** 2 / s), axis=-1)
    kyy = float(w @ pair @ w)
    kxy = 0.0
    for i in range(0, n, _CHUNK):
        d = x[i : i + _CHUNK, None, :] - mu[None]
        s1 = h2 + var[None]
        kxy += float(np.sum(np.prod(np.sqrt(h2 / s1) * np.exp(-0.5 * d * d / s1), axis=-1) @ w))
    return kxx + kyy - 2.0 * kxy / n


def ks_1d(samples, cdf: Callable):
    """One-sample KS statistic and asymptotic Kolmogorov p-value."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    return d, float(kolmogorov(math.sqrt(n) * d))


def ks_2samp(a, b):
    """Two-sample KS statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    pooled = np.concatenate([a, b])
    d = float(np.max(np.abs(np.searchsorted(a, pooled, "right") / a.size - np.searchsorted(b, pooled, "right") / b.size)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return d, float(kolmogorov(en * d))


def ks_2samp_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value ``c(alpha) sqrt((n + m) / (n m))``."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n + m) / (n * m))


def wasserstein1_1d(samples, reference: Union[np.ndarray, Callable], grid_points: int = 200_001) -> float:
    """W1 distance to a reference sample set or to a CDF.

    For a CDF the integral of ``|F_n - F|`` is taken by the trapezoid rule on a
    grid extending a few sample ranges past the data.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if not callable(reference):
        return float(stats.wasserstein_distance(x, np.asarray(reference, dtype=float).ravel()))
    span = x[-1] - x[0] if x[-1] > x[0] else 1.0
    lo, hi = x[0] - 5 * span, x[-1] + 5 * span
    grid = np.linspace(lo, hi, grid_points)
    emp = np.searchsorted(x, grid, "right") / x.size
    return float(integrate.trapezoid(np.abs(emp - reference(grid)), grid))


@dataclass
class MetricReport:
    values: dict
    counts: dict
    reference: str
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"metric {k} is not finite")
        for k, c in self.counts.items():
            if int(c) <= 0:
                raise ValueError(f"count {k} must be positive")

    def to_dict(self) -> dict:
        def conv(v):
            return np.asarray(v).tolist() if isinstance(v, np.ndarray) or isinstance(v, np.generic) else v

        return {
            "values": {k: conv(v) for k, v in self.values.items()},
            "counts": {k: int(v) for k, v in self.counts.items()},
            "reference": self.reference,
            "seed": self.seed,
            **({"extra": {k: conv(v) for k, v in self.extra.items()}} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(["reference", "seed", *sorted(self.values), *(f"n_{k}" for k in sorted(self.counts))])

    def csv_row(self) -> str:
        vals = [repr(float(self.values[k])) for k in sorted(self.values)]
        cnts = [str(int(self.counts[k])) for k in sorted(self.counts)]
        return ",".join([self.reference, str(self.seed), *vals, *cnts])
