"""One-covariate simulation with a hidden confounder and limited experimental overlap.

Experimental rows: X ~ Uniform[-1, 1], U ~ N(0, 1), T ~ Bernoulli(0.5).
Observational rows: T ~ Bernoulli(0.5), then (X, U) bivariate normal with
unit variances and correlation T - 0.5, so X is informative about the
unmeasured U differently in each arm. Both share

    Y = 1 + T + X + 2 T X + 0.5 X^2 + 0.75 T X^2 + U + noise_scale * eps.

The effect is 0.75 x^2 + 2 x + 1. On observational rows
E[U | X=x, T=1] - E[U | X=x, T=0] = 0.5 x - (-0.5 x) = x, so the
observational contrast is omega(x) = tau(x) + x and the confounding term
eta = tau - omega is -x. :func:`mc_true_omega` checks this by brute force.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DataError

FEATURE = "x"
DEFAULT_GRID = np.linspace(-3.0, 3.0, 121)


@dataclass(frozen=True)
class SimConfig:
    n_unc: int = 2000
    n_conf: int = 20000
    seed: int = 0
    noise_scale: float = 0.5
    include_confounding: bool = True

    def __post_init__(self):
        if self.n_unc < 1 or self.n_conf < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def outcome(x, t, u, eps, noise_scale: float = 0.5):
    return 1 + t + x + 2 * t * x + 0.5 * x**2 + 0.75 * t * x**2 + u + noise_scale * eps


def true_tau(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.75 * x**2 + 2 * x + 1


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def gen_unconfounded(cfg: SimConfig) -> Dataset:
    rng = _rng(cfg.seed, 0)
    n = cfg.n_unc
    x = rng.uniform(-1.0, 1.0, n)
    u = rng.standard_normal(n)
    t = rng.binomial(1, 0.5, n)
    eps = rng.standard_normal(n)
    y = outcome(x, t, u, eps, cfg.noise_scale)
    return Dataset(x.reshape(-1, 1), (FEATURE,), t, y, np.full(n, 0.5))


def _confounded_draw(rng: np.random.Generator, n: int, noise_scale: float, include_confounding: bool):
    t = rng.binomial(1, 0.5, n)
    x = rng.standard_normal(n)
    z = rng.standard_normal(n)
    rho = (t - 0.5) if include_confounding else np.zeros(n)
    u = rho * x + np.sqrt(1.0 - rho**2) * z
    eps = rng.standard_normal(n)
    return x, t, outcome(x, t, u, eps, noise_scale)


def gen_confounded(cfg: SimConfig) -> Dataset:
    x, t, y = _confounded_draw(_rng(cfg.seed, 1), cfg.n_conf, cfg.noise_scale, cfg.include_confounding)
    return Dataset(x.reshape(-1, 1), (FEATURE,), t, y)


def gen_pair(cfg: SimConfig) -> tuple[Dataset, Dataset]:
    """``(unconfounded, confounded)`` samples for one configuration."""
    return gen_unconfounded(cfg), gen_confounded(cfg)


def _local_average(xs_sorted, ys_sorted, x0, h):
    lo = np.searchsorted(xs_sorted, x0 - h, side="right")
    hi = np.searchsorted(xs_sorted, x0 + h, side="left")
    if hi <= lo:
        raise DataError(f"no oracle draws within bandwidth {h} of x={x0}")
    w = 1.0 - ((xs_sorted[lo:hi] - x0) / h) ** 2
    return float(np.dot(w, ys_sorted[lo:hi]) / w.sum())


def mc_true_omega(
    xs=DEFAULT_GRID,
    n_mc: int = 1_000_000,
    seed: int = 0,
    bandwidth: float = 0.1,
    noise_scale: float = 0.5,
    include_confounding: bool = True,
) -> np.ndarray:
    """Brute-force observational contrast on a grid.

    Draws a fresh observational sample of size ``n_mc`` and, at each grid
    point, takes Epanechnikov-weighted local averages of Y in each arm
    within ``bandwidth``; the result is their difference.
    """
    if n_mc < 10_000:
        raise ValueError("n_mc must be >= 1e4")
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    x, t, y = _confounded_draw(_rng(seed, 2), n_mc, noise_scale, include_confounding)
    arms = []
    for arm in (1, 0):
        mask = t == arm
        order = np.argsort(x[mask], kind="stable")
        arms.append((x[mask][order], y[mask][order]))
    out = np.empty(xs.size)
    for i, x0 in enumerate(xs):
        m1 = _local_average(*arms[0], x0, bandwidth)
        m0 = _local_average(*arms[1], x0, bandwidth)
        out[i] = m1 - m0
    return out


@dataclass(frozen=True, eq=False)
class GridOmega:
    """CATE model that linearly interpolates tabulated values (clamped outside the grid)."""

    grid: np.ndarray
    values: np.ndarray
    input_dim: int = 1

    def predict_effect(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        x = X[:, 0] if X.ndim == 2 else X
        return np.interp(x, self.grid, self.values)


def oracle_omega_model(
    n_mc: int = 1_000_000,
    seed: int = 0,
    grid=DEFAULT_GRID,
    bandwidth: float = 0.1,
    noise_scale: float = 0.5,
    include_confounding: bool = True,
) -> GridOmega:
    grid = np.asarray(grid, dtype=np.float64)
    values = mc_true_omega(grid, n_mc, seed, bandwidth, noise_scale, include_confounding)
    return GridOmega(grid, values)


def eta_sign(omega: GridOmega, lo: float = -1.0, hi: float = 1.0) -> float:
    """Sign of the slope of ``tau - omega`` over ``[lo, hi]``, fitted on the oracle grid."""
    mask = (omega.grid >= lo) & (omega.grid <= hi)
    g = omega.grid[mask]
    eta = true_tau(g) - omega.values[mask]
    slope = np.polyfit(g, eta, 1)[0]
    return float(np.sign(slope))


def true_theta(feature_map, sign: float) -> np.ndarray:
    """Correction parameters of the linear confounding term ``sign * x``.

    Supported for maps whose features include ``x`` itself: identity,
    identity plus intercept, and polynomials of degree >= 1.
    """
    names = feature_map.names([FEATURE])
    if FEATURE not in names:
        raise ValueError(f"feature map {feature_map.label} cannot represent a linear term")
    theta = np.zeros(len(names))
    theta[names.index(FEATURE)] = sign
    return theta
