"""Generalized Pareto tail fits, pruning thresholds and the patience counter."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

MIN_FIT_SIZE = 30
XI_BOUNDS = (-0.5, 1.0)
XI_ZERO = 1e-9


class GpdFitError(ValueError):
    pass


@dataclass(frozen=True)
class GpdFit:
    xi: float
    sigma: float
    mu: float
    n: int

    def cdf(self, x: float | np.ndarray) -> np.ndarray:
        z = np.maximum(np.asarray(x, dtype=float) - self.mu, 0.0) / self.sigma
        if abs(self.xi) < XI_ZERO:
            return 1.0 - np.exp(-z)
        base = np.maximum(1.0 + self.xi * z, 0.0)
        return 1.0 - base ** (-1.0 / self.xi)


def _neg_loglik(xi: float, sigma: float, y: np.ndarray) -> float:
    if sigma <= 0:
        return math.inf
    z = y / sigma
    if abs(xi) < XI_ZERO:
        return len(y) * math.log(sigma) + float(z.sum())
    t = 1.0 + xi * z
    if np.any(t <= 0):
        return math.inf
    return len(y) * math.log(sigma) + (1.0 + 1.0 / xi) * float(np.log(t).sum())


def _profile_sigma(xi: float, y: np.ndarray) -> tuple[float, float]:
    """Maximise the likelihood over ``sigma`` for a fixed shape; returns (sigma, nll)."""
    ymax = float(y.max())
    mean = float(y.mean())
    # For xi < 0 the support is [0, sigma / -xi], so sigma must exceed -xi * max(y).
    lo = max(-xi * ymax * (1 + 1e-9), mean * 1e-3)
    hi = max(mean * 50.0, lo * 10.0)
    res = minimize_scalar(
        lambda s: _neg_loglik(xi, math.exp(s), y),
        bounds=(math.log(lo), math.log(hi)),
        method="bounded",
        options={"xatol": 1e-10},
    )
    return math.exp(res.x), float(res.fun)


def _moments(y: np.ndarray) -> tuple[float, float]:
    m = float(y.mean())
    v = float(y.var())
    ratio = m * m / v
    xi = 0.5 * (1.0 - ratio)
    sigma = 0.5 * m * (ratio + 1.0)
    return xi, sigma


def fit_gpd(errors: Sequence[float] | np.ndarray, min_size: int = MIN_FIT_SIZE) -> GpdFit:
    """Fit a GPD with location at ``min(errors)`` by profile maximum likelihood.

    The shape is searched on ``XI_BOUNDS``; if the search produces a
    non-finite likelihood the method-of-moments estimate is used instead.
    """
    x = np.asarray(errors, dtype=float).ravel()
    if x.size < min_size:
        raise GpdFitError(f"need at least {min_size} errors to fit, got {x.size}")
    if not np.isfinite(x).all():
        raise GpdFitError("errors contain non-finite values")
    mu = float(x.min())
    y = x - mu
    if float(y.max()) <= 0.0:
        raise GpdFitError("zero spread: all errors are equal")

    xi = sigma = math.nan
    try:
        res = minimize_scalar(
            lambda k: _profile_sigma(k, y)[1],
            bounds=XI_BOUNDS,
            method="bounded",
            options={"xatol": 1e-6},
        )
        if np.isfinite(res.fun):
            xi = float(res.x)
            sigma, _ = _profile_sigma(xi, y)
    except (ValueError, FloatingPointError, OverflowError):
        pass
    if not (np.isfinite(xi) and np.isfinite(sigma) and sigma > 0):
        xi, sigma = _moments(y)
        xi = float(np.clip(xi, *XI_BOUNDS))
        if xi < 0:
            sigma = max(sigma, -xi * float(y.max()) * (1 + 1e-9))
    return GpdFit(xi=xi, sigma=sigma, mu=mu, n=int(x.size))


def gpd_quantile(fit: GpdFit, p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if abs(fit.xi) < XI_ZERO:
        return fit.mu - fit.sigma * math.log1p(-p)
    return fit.mu + fit.sigma / fit.xi * ((1.0 - p) ** (-fit.xi) - 1.0)


def select_threshold(
    errors: Sequence[float] | np.ndarray,
    p: float = 0.8,
    fit: GpdFit | None = None,
    min_size: int = MIN_FIT_SIZE,
) -> float:
    """Return the observed error closest to the fitted ``p``-quantile.

    Ties go to the smaller error, which prunes less.
    """
    x = np.sort(np.asarray(errors, dtype=float).ravel())
    if fit is None:
        fit = fit_gpd(x, min_size=min_size)
    q = gpd_quantile(fit, p)
    i = int(np.searchsorted(x, q))
    candidates = [x[j] for j in (i - 1, i) if 0 <= j < x.size]
    return float(min(candidates, key=lambda e: (abs(e - q), e)))


@dataclass
class PatienceState:
    alpha: float
    omega: float = 0.0
    best_loss: float = math.inf
    stall_count: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")


def patience_step(state: PatienceState, current_loss: float) -> bool:
    """Advance the stall counter; True when ``alpha`` non-improving calls have accumulated.

    An improvement must beat ``best_loss`` by more than ``omega``. After
    firing, the counter restarts but ``best_loss`` is kept.
    """
    if state.best_loss - current_loss > state.omega:
        state.best_loss = current_loss
        state.stall_count = 0
        return False
    state.stall_count += 1
    if state.stall_count >= state.alpha:
        state.stall_count = 0
        return True
    return False
