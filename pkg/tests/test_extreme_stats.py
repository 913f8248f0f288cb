import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capaudit.extreme_stats import (
    GpdFit,
    GpdFitError,
    PatienceState,
    fit_gpd,
    gpd_quantile,
    patience_step,
    select_threshold,
)


def _gpd_sample(rng, xi, sigma, n):
    # Inverse-CDF draw, independent of the fitting code.
    u = rng.uniform(size=n)
    if xi == 0:
        return -sigma * np.log1p(-u)
    return sigma / xi * ((1 - u) ** (-xi) - 1)


def test_fit_recovers_exponential():
    x = np.random.default_rng(0).exponential(1.0, 10_000)
    f = fit_gpd(x)
    assert -0.1 <= f.xi <= 0.1
    assert 0.9 <= f.sigma <= 1.1
    assert f.mu == x.min() and f.n == 10_000


def test_fit_recovers_heavy_tail():
    x = _gpd_sample(np.random.default_rng(1), 0.5, 2.0, 10_000)
    f = fit_gpd(x)
    assert 0.4 <= f.xi <= 0.6
    assert 1.7 <= f.sigma <= 2.3


def test_fit_agrees_with_scipy_mle():
    from scipy.stats import genpareto

    x = _gpd_sample(np.random.default_rng(2), 0.2, 1.5, 5_000)
    f = fit_gpd(x)
    c, _, scale = genpareto.fit(x, floc=x.min())
    assert f.xi == pytest.approx(c, abs=1e-3)
    assert f.sigma == pytest.approx(scale, rel=1e-3)


def test_fit_consistency_improves_with_n():
    rng = np.random.default_rng(3)
    errs = []
    for n in (1_000, 10_000, 100_000):
        per_n = []
        for _ in range(5):
            f = fit_gpd(_gpd_sample(rng, 0.3, 1.0, n))
            per_n.append(abs(f.xi - 0.3) + abs(f.sigma - 1.0))
        errs.append(np.mean(per_n))
    assert errs[0] > errs[1] > errs[2]


def test_fit_cdf_at_empirical_p80():
    rng = np.random.default_rng(4)
    for x in (rng.exponential(size=2000), rng.gamma(2.0, size=2000), np.abs(rng.normal(size=2000)),
              _gpd_sample(rng, 0.4, 1.0, 2000)):
        f = fit_gpd(x)
        assert 0.6 <= float(f.cdf(np.percentile(x, 80))) <= 0.95


def test_fit_errors():
    with pytest.raises(GpdFitError, match="zero spread"):
        fit_gpd(np.full(50, 2.0))
    with pytest.raises(GpdFitError):
        fit_gpd(np.arange(10.0))
    with pytest.raises(GpdFitError):
        fit_gpd(np.r_[np.arange(40.0), np.inf])


def test_fit_shape_clamped():
    x = np.random.default_rng(5).uniform(size=1000)  # true xi = -1
    f = fit_gpd(x)
    assert f.xi >= -0.5
    assert f.mu + f.sigma / -f.xi >= x.max()


def test_quantile_closed_forms():
    assert gpd_quantile(GpdFit(0.0, 1.0, 0.0, 100), 0.8) == pytest.approx(-math.log(0.2), abs=1e-12)
    assert gpd_quantile(GpdFit(0.0, 1.0, 0.0, 100), 0.8) == pytest.approx(1.60944, abs=1e-5)
    assert gpd_quantile(GpdFit(0.5, 1.0, 0.0, 100), 0.8) == pytest.approx((0.2 ** -0.5 - 1) / 0.5, abs=1e-12)
    assert gpd_quantile(GpdFit(0.5, 1.0, 0.0, 100), 0.8) == pytest.approx(2.47214, abs=1e-5)
    assert gpd_quantile(GpdFit(1e-12, 1.0, 0.0, 100), 0.8) == pytest.approx(1.60944, abs=1e-5)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(p):
    with pytest.raises(ValueError):
        gpd_quantile(GpdFit(0.0, 1.0, 0.0, 100), p)


@settings(max_examples=200, deadline=None)
@given(
    xi=st.floats(-0.5, 1.0),
    sigma=st.floats(1e-3, 100),
    mu=st.floats(-10, 10),
    p=st.floats(0.01, 0.98),
    dp=st.floats(0.005, 0.5),
)
def test_quantile_monotone(xi, sigma, mu, p, dp):
    f = GpdFit(xi, sigma, mu, 100)
    q = min(p + dp, 0.999)
    assert gpd_quantile(f, p) < gpd_quantile(f, q)


def test_threshold_exact_match():
    fit = GpdFit(0.0, 1.0, 0.0, 3)
    assert select_threshold([1.0, 1.60944, 3.0], 0.8, fit=fit) == 1.60944


def test_threshold_tie_prefers_smaller():
    fit = GpdFit(0.0, 1.0, 0.0, 2)
    q = gpd_quantile(fit, 0.8)
    assert select_threshold([q - 0.25, q + 0.25], 0.8, fit=fit) == q - 0.25


@pytest.mark.parametrize("n", [1_000, 5_000, 20_000])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_threshold_vs_empirical_quantiles(n, seed):
    x = np.random.default_rng(seed).exponential(size=n)
    tau = select_threshold(x)
    p75, p80, p85 = np.percentile(x, [75, 80, 85])
    assert p75 <= tau <= p85
    assert abs(tau - p80) / p80 <= 0.15
    assert tau in x


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=30, max_size=200).filter(lambda v: max(v) > min(v)))
def test_threshold_is_sample_member(errors):
    assert select_threshold(errors) in errors


def test_patience_hand_trace():
    s = PatienceState(alpha=2, omega=0.01)
    assert [patience_step(s, l) for l in (1.0, 0.995, 0.994)] == [False, False, True]
    assert s.best_loss == 1.0 and s.stall_count == 0


def test_patience_never_fires_on_improvement():
    s = PatienceState(alpha=1, omega=0.1)
    assert not any(patience_step(s, 100 - 0.2 * i) for i in range(200))


@pytest.mark.parametrize("alpha", [1, 2, 3, 7])
def test_patience_constant_stream(alpha):
    s = PatienceState(alpha=alpha, omega=0.0)
    fired = [patience_step(s, 1.0) for _ in range(1 + 10 * alpha)]
    # First call sets best_loss; after that every alpha-th call fires.
    expected = [False] + [(i + 1) % alpha == 0 for i in range(10 * alpha)]
    assert fired == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.floats(0, 0.5), st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_patience_needs_alpha_stalls(alpha, omega, losses):
    s = PatienceState(alpha=alpha, omega=omega)
    best = math.inf
    stalls = 0
    for l in losses:
        fired = patience_step(s, l)
        if best - l > omega:
            best, stalls = l, 0
        else:
            stalls += 1
        assert fired == (stalls == alpha)
        if fired:
            stalls = 0
        assert 0 <= s.stall_count <= alpha


def test_patience_infinite_alpha():
    s = PatienceState(alpha=math.inf, omega=0.0)
    assert not any(patience_step(s, 1.0) for _ in range(500))


def test_patience_validation():
    with pytest.raises(ValueError):
        PatienceState(alpha=0)
    with pytest.raises(ValueError):
        PatienceState(alpha=1, omega=-1)
