import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from phonebatt.errors import (
    DegenerateBounds,
    EmptySamples,
    InsufficientSamples,
    NonMonotoneAbscissa,
    StepUnderflow,
    TooFewKnots,
)
from phonebatt.numerics import (
    MAX_STEP_S,
    TAU_SEEDS,
    RngStream,
    build_monotone_interpolant,
    empirical_quantile,
    empirical_quantiles,
    eval_interpolant,
    fit_exponential_relaxation,
    pchip_coefficients,
    pchip_eval_poly,
    rk4_adaptive_step,
    rk4_step,
    sample_truncated_normal,
    truncated_normal_batch,
)


# -- interpolant ------------------------------------------------------------------


def test_knot_reproduction():
    f = build_monotone_interpolant([0.0, 0.5, 1.0], [3.0, 3.7, 4.2])
    assert eval_interpolant(f, 0.5) == 3.7
    assert eval_interpolant(f, 0.0) == 3.0
    assert eval_interpolant(f, 1.0) == 4.2


def test_clamps_outside_domain():
    f = build_monotone_interpolant([0.0, 0.5, 1.0], [3.0, 3.7, 4.2])
    assert eval_interpolant(f, -0.1) == 3.0
    assert eval_interpolant(f, 1.7) == 4.2


def test_reproduces_linear_data():
    xs = np.linspace(0.0, 1.0, 7)
    f = build_monotone_interpolant(xs, xs)
    assert abs(eval_interpolant(f, 0.3) - 0.3) <= 1e-12


def test_monotone_on_dense_grid():
    f = build_monotone_interpolant([0.0, 0.1, 0.2, 0.5, 0.9, 1.0], [2.6, 3.3, 3.5, 3.74, 4.07, 4.18])
    y = eval_interpolant(f, np.linspace(0.0, 1.0, 1000))
    assert np.all(np.diff(y) >= 0.0)


def test_rejects_repeated_abscissa():
    with pytest.raises(NonMonotoneAbscissa):
        build_monotone_interpolant([0.0, 0.0, 1.0], [1.0, 2.0, 3.0])


def test_rejects_two_knots():
    with pytest.raises(TooFewKnots):
        build_monotone_interpolant([0.0, 1.0], [1.0, 2.0])


def test_vector_eval_matches_scalar():
    f = build_monotone_interpolant([0.0, 0.3, 0.6, 1.0], [1.0, 1.2, 2.0, 2.1])
    x = np.array([-0.5, 0.0, 0.1, 0.45, 0.99, 1.0, 3.0])
    np.testing.assert_array_equal(eval_interpolant(f, x), [eval_interpolant(f, v) for v in x])


def test_power_basis_matches_hermite_form():
    f = build_monotone_interpolant([0.0, 0.2, 0.3, 0.7, 1.0], [2.6, 3.4, 3.5, 3.9, 4.2])
    coef = pchip_coefficients(f.knots_x, f.knots_y, f.slopes)
    for x in np.linspace(-0.1, 1.1, 301):
        assert pchip_eval_poly(f.knots_x, coef, x) == pytest.approx(eval_interpolant(f, x), abs=1e-13)


@st.composite
def monotone_knots(draw):
    n = draw(st.integers(3, 12))
    dx = draw(st.lists(st.floats(1e-3, 1.0), min_size=n - 1, max_size=n - 1))
    dy = draw(st.lists(st.floats(0.0, 2.0), min_size=n - 1, max_size=n - 1))
    sign = draw(st.sampled_from([1.0, -1.0]))
    x = np.concatenate([[0.0], np.cumsum(dx)])
    y = 3.0 + sign * np.concatenate([[0.0], np.cumsum(dy)])
    return x, y


@given(monotone_knots())
def test_no_overshoot(knots):
    x, y = knots
    f = build_monotone_interpolant(x, y)
    grid = np.linspace(x[0] - 0.1, x[-1] + 0.1, 2000)
    v = eval_interpolant(f, grid)
    slack = 1e-12 * max(1.0, np.abs(y).max())
    assert v.min() >= y.min() - slack
    assert v.max() <= y.max() + slack
    d = np.diff(v)
    if y[-1] >= y[0]:
        assert np.all(d >= -slack)
    else:
        assert np.all(d <= slack)


# -- RK4 ---------------------------------------------------------------------------


def test_zero_field_leaves_state():
    y0 = np.array([0.5, 0.01, 290.0])
    y, dt = rk4_adaptive_step(y0, lambda t, y: np.zeros(3), 0.0, 5.0, 1e-9)
    np.testing.assert_array_equal(y, y0)
    assert dt == MAX_STEP_S
    _, dt = rk4_adaptive_step(y0, lambda t, y: np.zeros(3), 0.0, 0.25, 1e-9)
    assert dt == 0.25


def test_exponential_decay_to_one_second():
    t, y = 0.0, np.array([1.0])
    while t < 1.0 - 1e-15:
        y, dt = rk4_adaptive_step(y, lambda t, y: -y, t, 1.0 - t, 1e-10)
        t += dt
    assert abs(y[0] - math.exp(-1.0)) <= 1e-6


def test_non_finite_field_underflows():
    with pytest.raises(StepUnderflow):
        rk4_adaptive_step(np.array([1.0]), lambda t, y: np.array([np.nan]), 0.0, 1.0, 1e-6)


def test_fourth_order_convergence():
    errs = []
    for dt in (0.5, 0.25, 0.125):
        y = np.array([1.0])
        for k in range(int(round(1.0 / dt))):
            y = rk4_step(lambda t, y: -y, k * dt, y, dt)
        errs.append(abs(y[0] - math.exp(-1.0)))
    for a, b in zip(errs, errs[1:]):
        assert 8.0 <= a / b <= 32.0


# -- random streams ----------------------------------------------------------------


def test_stream_determinism():
    a = RngStream(7, 3).uniform(10_000)
    b = RngStream(7, 3).uniform(10_000)
    np.testing.assert_array_equal(a, b)


def test_streams_differ_by_key():
    base = RngStream(7, 3).uniform(8)
    assert not np.array_equal(base, RngStream(7, 4).uniform(8))
    assert not np.array_equal(base, RngStream(8, 3).uniform(8))
    assert not np.array_equal(base, RngStream(7, 3).child(0).uniform(8))
    np.testing.assert_array_equal(RngStream(7, 3).child(1).uniform(8), RngStream(7, 3).child(1).uniform(8))


def test_stream_rejects_negative_seed():
    with pytest.raises(ValueError):
        RngStream(-1, 0)


# -- truncated normal --------------------------------------------------------------


def test_gaming_draws_within_cap():
    cap = 4.5 + 5 * 0.8
    x = truncated_normal_batch(np.full(100_000, 4.5), 0.8, 0.0, cap, RngStream(1, 0))
    assert x.min() >= 0.0 and x.max() <= cap


def test_point_mass_limit():
    assert sample_truncated_normal(1.0, 1e-9, 0.0, 2.0, RngStream(2, 0)) == pytest.approx(1.0, abs=1e-6)


def test_idle_mean_matches_analytic():
    mu, sigma, lo, hi = 0.15, 0.05, 0.0, 0.15 + 5 * 0.05
    x = truncated_normal_batch(np.full(100_000, mu), sigma, lo, hi, RngStream(3, 0))
    exact = stats.truncnorm.mean((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - exact) <= 3.0 * se


def test_narrow_window_uses_inverse_cdf():
    # acceptance here is ~1e-9; rejection would never finish
    x = truncated_normal_batch(np.zeros(20_000), 1.0, 6.0, 6.5, RngStream(4, 0))
    assert x.min() >= 6.0 and x.max() <= 6.5
    exact = stats.truncnorm.mean(6.0, 6.5)
    assert abs(x.mean() - exact) < 5e-3


def test_support_sweep_million():
    x = truncated_normal_batch(np.full(1_000_000, 1.2), 0.3, 0.0, 2.7, RngStream(5, 0))
    assert x.min() >= 0.0 and x.max() <= 2.7


def test_degenerate_bounds():
    with pytest.raises(DegenerateBounds):
        sample_truncated_normal(1.0, 0.1, 2.0, 2.0, RngStream(0, 0))


@given(
    mu=st.floats(-5, 5),
    sigma=st.floats(1e-3, 5),
    lo=st.floats(-10, 10),
    width=st.floats(1e-3, 10),
    seed=st.integers(0, 2**32),
)
def test_truncated_normal_support(mu, sigma, lo, width, seed):
    x = truncated_normal_batch(np.full(200, mu), sigma, lo, lo + width, RngStream(seed, 0))
    assert np.all((x >= lo) & (x <= lo + width))


# -- relaxation fit ----------------------------------------------------------------


def test_relaxation_fit_noiseless():
    t = np.arange(0.0, 600.0, 1.0)
    v = 3.8 - 0.1 * np.exp(-t / 100.0)
    fit = fit_exponential_relaxation(t, v)
    assert fit.v_inf == pytest.approx(3.8, rel=1e-3)
    assert fit.v_p == pytest.approx(0.1, rel=1e-3)
    assert fit.tau == pytest.approx(100.0, rel=1e-3)


def test_relaxation_fit_flat():
    fit = fit_exponential_relaxation(np.arange(20.0), np.full(20, 3.8))
    assert fit.v_inf == 3.8 and fit.v_p == 0.0 and fit.rmse == 0.0
    assert fit.vp_negligible
    assert fit.tau == TAU_SEEDS[0]


def test_relaxation_fit_too_short():
    with pytest.raises(InsufficientSamples):
        fit_exponential_relaxation([0.0, 1.0, 2.0], [3.7, 3.75, 3.77])


# -- quantiles ---------------------------------------------------------------------


def test_quantile_nearest_rank():
    assert empirical_quantile(np.arange(1, 101), 0.05) == 5
    assert empirical_quantile([7.0], 0.3) == 7.0
    assert empirical_quantile([3, 1, 2], 0.5) == 2


def test_quantile_errors():
    with pytest.raises(EmptySamples):
        empirical_quantile([], 0.5)
    with pytest.raises(ValueError):
        empirical_quantile([1.0], 1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=2000), st.floats(0.001, 0.999))
def test_quantile_brute_force(xs, q):
    srt = sorted(xs)
    k = max(1, math.ceil(q * len(xs) - 1e-9))
    assert empirical_quantile(xs, q) == srt[min(k, len(xs)) - 1]
    assert empirical_quantiles(xs, [q])[q] == srt[min(k, len(xs)) - 1]
