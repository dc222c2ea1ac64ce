import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from phonebatt.errors import InvalidMix, InvalidParameters, NonPositiveDwell
from phonebatt.numerics import RngStream
from phonebatt.usage import (
    DEFAULT_MODES,
    CtmcSpec,
    GeneratorMatrix,
    ModeSpec,
    Multipliers,
    UsageModel,
    build_generator,
    decompose_power,
    destination_from_uniform,
    dwell_from_uniform,
    high_power_bias,
    sample_dwell,
    sample_session_load,
    sample_transition,
    scale_dwell,
    spec_from_generator,
    stationary_distribution,
    usage_diagnostics,
)

# the generator printed to 4 d.p. for the default usage table
PRINTED_Q = np.array([
    [-0.0556, 0.0250, 0.0167, 0.0083, 0.0056],
    [0.0583, -0.1667, 0.0417, 0.0250, 0.0417],
    [0.0375, 0.0208, -0.0833, 0.0167, 0.0083],
    [0.1375, 0.0375, 0.0375, -0.2500, 0.0375],
    [0.1667, 0.1000, 0.0333, 0.0333, -0.3333],
])

GAMING = DEFAULT_MODES[3]
IDLE = DEFAULT_MODES[0]


def test_printed_generator_to_four_places():
    q = build_generator(CtmcSpec()).q
    np.testing.assert_array_equal(np.round(q, 4), PRINTED_Q)


def test_idle_and_gaming_rows():
    q = build_generator(CtmcSpec()).q
    assert round(q[0, 1], 4) == 0.0250
    assert round(q[0, 0], 4) == -0.0556
    assert round(q[3, 0], 4) == 0.1375


def test_single_destination_row():
    g = build_generator(CtmcSpec((10.0, 5.0), ((0.0, 1.0), (1.0, 0.0))))
    assert g.q[0, 1] == pytest.approx(0.1) and g.q[0, 0] == pytest.approx(-0.1)


def test_rejects_bad_specs():
    with pytest.raises(NonPositiveDwell):
        build_generator(CtmcSpec((0.0, 5.0), ((0.0, 1.0), (1.0, 0.0))))
    with pytest.raises(InvalidMix):
        build_generator(CtmcSpec((1.0, 5.0), ((0.0, 0.9), (1.0, 0.0))))
    with pytest.raises(InvalidMix):
        build_generator(CtmcSpec((1.0, 5.0), ((0.5, 0.5), (1.0, 0.0))))


@st.composite
def ctmc_specs(draw):
    m = draw(st.integers(2, 7))
    dwell = draw(st.lists(st.floats(0.05, 500.0), min_size=m, max_size=m))
    mix = []
    for i in range(m):
        w = draw(st.lists(st.floats(0.0, 1.0), min_size=m - 1, max_size=m - 1))
        if sum(w) == 0:
            w[0] = 1.0
        tot = math.fsum(w)
        row = [x / tot for x in w]
        # absorb round-off so the row sums to 1 within 1e-9
        row[-1] = 1.0 - math.fsum(row[:-1])
        row.insert(i, 0.0)
        mix.append(tuple(max(0.0, p) for p in row))
    return CtmcSpec(tuple(dwell), tuple(mix))


@given(ctmc_specs())
def test_generator_invariants(spec):
    q = build_generator(spec).q
    assert np.all(np.abs(q.sum(axis=1)) <= 1e-12 * np.abs(np.diag(q)).max() * q.shape[0] + 1e-12)
    off = q[~np.eye(q.shape[0], dtype=bool)]
    assert np.all(off >= 0.0)
    assert np.all(np.diag(q) < 0.0)


@given(ctmc_specs())
def test_generator_round_trip(spec):
    back = spec_from_generator(build_generator(spec))
    np.testing.assert_allclose(back.dwell_minutes, spec.dwell_minutes, rtol=1e-12)
    np.testing.assert_allclose(back.transition_mix, spec.transition_mix, atol=1e-12)


# -- dwell and transitions -------------------------------------------------------


def test_idle_mean_dwell():
    g = build_generator(CtmcSpec())
    rng = RngStream(11, 0)
    x = np.array([sample_dwell(g, 0, rng) for _ in range(100_000)])
    assert abs(x.mean() - 18.0) <= 3.0 * 18.0 / math.sqrt(x.size)


def test_inverse_cdf_identity():
    assert dwell_from_uniform(0.25, math.exp(-1.0)) == pytest.approx(4.0, rel=1e-15)


def test_dwell_support():
    rate = 1.0 / 3.0
    u = RngStream(12, 0).gen.random(1_000_000)
    u = u[u > 0.0]
    assert np.all(-np.log(u) / rate > 0.0)
    rng = RngStream(12, 1)
    g = build_generator(CtmcSpec())
    assert all(sample_dwell(g, 4, rng) > 0.0 for _ in range(10_000))


def test_gaming_to_idle_frequency():
    g = build_generator(CtmcSpec())
    assert g.jump_probabilities(3)[0] == pytest.approx(0.55, rel=1e-12)
    rng = RngStream(13, 0)
    n = 100_000
    hits = sum(sample_transition(g, 3, rng) == 0 for _ in range(n))
    assert abs(hits / n - 0.55) <= 3.0 * math.sqrt(0.55 * 0.45 / n)


def test_single_destination_always_taken():
    g = build_generator(CtmcSpec((10.0, 5.0, 2.0), ((0.0, 0.0, 1.0), (0.5, 0.0, 0.5), (0.5, 0.5, 0.0))))
    rng = RngStream(14, 0)
    assert {sample_transition(g, 0, rng) for _ in range(2000)} == {2}


def test_destination_frequencies_chi_square():
    g = build_generator(CtmcSpec())
    u = RngStream(15, 0).gen.random(20_000 * g.n_modes)
    for i in range(g.n_modes):
        p = g.jump_probabilities(i)
        counts = np.bincount([destination_from_uniform(p, v) for v in u[i::g.n_modes]], minlength=g.n_modes)
        assert counts[i] == 0
        keep = np.arange(g.n_modes) != i
        _, pval = stats.chisquare(counts[keep], p[keep] * counts.sum())
        assert pval > 0.001


def test_destination_skips_zero_mass():
    p = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    assert destination_from_uniform(p, 0.0) == 1
    assert destination_from_uniform(p, 1.0 - 1e-17) == 3


# -- loads -------------------------------------------------------------------------


def test_gaming_loads_within_cap():
    rng = RngStream(16, 0)
    x = np.array([sample_session_load(GAMING, rng) for _ in range(20_000)])
    assert x.min() >= 0.0 and x.max() <= GAMING.p_cap


def test_idle_load_mean():
    rng = RngStream(17, 0)
    x = np.array([sample_session_load(IDLE, rng) for _ in range(50_000)])
    a, b = (0.0 - 0.15) / 0.05, (IDLE.p_cap - 0.15) / 0.05
    exact = stats.truncnorm.mean(a, b, loc=0.15, scale=0.05)
    assert abs(x.mean() - exact) <= 3.0 * x.std(ddof=1) / math.sqrt(x.size)


def test_point_mass_load():
    m = ModeSpec("flat", 2.0, 1e-9, 0.25, 0.25, 0.25, 0.25)
    assert sample_session_load(m, RngStream(18, 0)) == pytest.approx(2.0, abs=1e-6)


def test_default_cap():
    assert GAMING.p_cap == pytest.approx(4.5 + 5 * 0.8)


def test_mode_validation():
    with pytest.raises(InvalidParameters):
        ModeSpec("bad", 1.0, 0.1, 0.5, 0.5, 0.5, 0.0)
    with pytest.raises(InvalidParameters):
        ModeSpec("bad", 1.0, 0.0, 0.25, 0.25, 0.25, 0.25)


# -- power split -------------------------------------------------------------------


def test_gaming_split():
    s = decompose_power(4.5, GAMING, Multipliers(), 0.9)
    assert (s.p_scr, s.p_cpu, s.p_net, s.p_bg) == pytest.approx((1.125, 2.475, 0.675, 0.225), abs=1e-12)
    assert s.p_req == pytest.approx(4.5, abs=1e-12)


def test_dimmed_split():
    s = decompose_power(4.5, GAMING, Multipliers(rho_b=0.5), 0.9)
    assert s.p_scr == pytest.approx(0.5625, abs=1e-12)
    assert s.p_req == pytest.approx(3.9375, abs=1e-12)
    assert s.p_batt == pytest.approx(4.375, abs=1e-12)


def test_zero_load_split():
    s = decompose_power(0.0, GAMING, Multipliers(), 0.9)
    assert (s.p_load, s.p_scr, s.p_cpu, s.p_net, s.p_bg, s.p_req, s.p_batt) == (0.0,) * 7


@given(
    p=st.floats(0.0, 20.0),
    k=st.floats(0.0, 10.0),
    mode=st.sampled_from(DEFAULT_MODES),
    rb=st.floats(0.3, 1.0),
    rbg=st.floats(0.3, 1.0),
    rws=st.floats(1.0, 2.0),
)
def test_split_homogeneous_and_additive(p, k, mode, rb, rbg, rws):
    mult = Multipliers(rb, rbg, rws)
    a = decompose_power(p, mode, mult, 0.9)
    b = decompose_power(k * p, mode, mult, 0.9)
    assert b.p_req == pytest.approx(k * a.p_req, rel=1e-12, abs=1e-300)
    assert abs(a.p_req - (a.p_scr + a.p_cpu + a.p_net + a.p_bg)) <= 1e-12 * max(1.0, a.p_req)
    assert min(a.p_scr, a.p_cpu, a.p_net, a.p_bg) >= 0.0
    assert a.p_batt == a.p_req / 0.9


@given(p=st.floats(0.0, 20.0), mode=st.sampled_from(DEFAULT_MODES))
def test_unit_multipliers_pass_load_through(p, mode):
    assert decompose_power(p, mode, Multipliers(), 0.9).p_req == pytest.approx(p, rel=1e-12, abs=1e-300)


# -- perturbations and diagnostics -----------------------------------------------


def test_stationary_distribution_balances():
    g = build_generator(CtmcSpec())
    pi = stationary_distribution(g)
    assert pi.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(pi @ g.q, 0.0, atol=1e-14)


def test_dwell_scaling_scales_rates():
    g = build_generator(CtmcSpec())
    g2 = build_generator(scale_dwell(CtmcSpec(), 0.8))
    np.testing.assert_allclose(g2.q, g.q / 0.8, rtol=1e-12)


def test_high_power_bias_rows_stay_stochastic():
    spec = high_power_bias(CtmcSpec(), DEFAULT_MODES, 0.10)
    build_generator(spec)
    mix, base = np.array(spec.transition_mix), np.array(CtmcSpec().transition_mix)
    hp = [2, 3, 4]
    # the idle row gains high-power mass
    assert mix[0, hp].sum() > base[0, hp].sum()


def test_diagnostics_shape():
    d = usage_diagnostics(UsageModel())
    assert len(d["stationary"]) == 5
    assert 0.0 < d["screen_on_hours_per_day"] < 24.0
    assert d["jumps_per_day"] > 0.0


def test_generator_equality():
    assert build_generator(CtmcSpec()) == GeneratorMatrix(build_generator(CtmcSpec()).q.copy())
