import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonebatt.battery import CELSIUS, T_REF_DEFAULT, BatteryParams, BatteryState
from phonebatt.engine import (
    GRID_DT_S,
    SimScenario,
    ShutdownDetector,
    distribution_from_runs,
    run_ablation_suite,
    run_batch,
    run_monte_carlo,
    run_replication,
    run_statistic,
    run_trajectory,
    update_detector,
)
from phonebatt.errors import AllRunsCensored, InvalidParameters
from phonebatt.numerics import RngStream, empirical_quantile
from phonebatt.usage import CtmcSpec, ModeSpec, UsageModel

WARM = T_REF_DEFAULT


def constant_load(p_req: float, t_env: float = WARM, **kw) -> SimScenario:
    return SimScenario(t_env=t_env, horizon=kw.pop("horizon", 48 * 3600.0), profile=((1e9, p_req),), **kw)


def single_mode(mu: float, sigma: float, dwell: float = 10.0) -> UsageModel:
    return UsageModel(modes=(ModeSpec("only", mu, sigma, 0.25, 0.25, 0.25, 0.25),),
                      ctmc=CtmcSpec((dwell,), ((0.0,),)))


# -- detector -----------------------------------------------------------------------


def test_short_dip_does_not_fire():
    d = ShutdownDetector(2.0)
    trace = [(0.0, 3.2), (1.0, 2.9), (2.0, 3.1), (3.0, 3.2)]
    assert all(update_detector(d, v, 3.0, True, t) is None for t, v in trace)
    assert d.below_since is None


def test_persistent_dip_fires_at_window_start():
    d = ShutdownDetector(2.0)
    assert update_detector(d, 2.95, 3.0, True, 100.0) is None
    assert update_detector(d, 2.95, 3.0, True, 101.0) is None
    sd = update_detector(d, 2.90, 3.0, True, 102.0)
    assert sd.t == 100.0 and sd.cause == "voltage_persist"


def test_infeasible_fires_immediately():
    sd = update_detector(ShutdownDetector(2.0), 3.5, 3.0, False, 50.0)
    assert sd.t == 50.0 and sd.cause == "infeasible_power"


def test_window_start_never_after_now():
    d = ShutdownDetector(5.0)
    for t in np.arange(0.0, 4.0, 0.5):
        update_detector(d, 2.9, 3.0, True, t)
        assert d.below_since <= t


def _pulse(width: float) -> SimScenario:
    return SimScenario(t_env=WARM, horizon=300.0, initial=BatteryState(0.10, 0.0, WARM),
                       profile=((100.0, 0.5), (width, 20.0), (1000.0, 0.5)))


def test_pulse_debounce_in_simulation():
    short = run_trajectory(_pulse(1.0))
    assert short.censored and short.shutdown_cause == "horizon"
    assert np.any(short.v_term < 3.0)
    long = run_trajectory(_pulse(2.0))
    assert not long.censored and long.shutdown_cause == "voltage_persist"
    assert long.tte == 100.0


# -- single trajectories -------------------------------------------------------------


def test_null_dynamics():
    s = SimScenario(usage=single_mode(0.0, 1e-12), t_env=WARM, horizon=3600.0)
    tr = run_trajectory(s)
    assert tr.censored and tr.tte == 3600.0
    assert abs(tr.z_end - 1.0) <= 1e-9


def test_scenario_a_room_temperature():
    tr = run_trajectory(constant_load(0.5))
    assert not tr.censored
    assert tr.z_end < 0.05
    assert np.all(np.diff(tr.z) <= 0.0)
    # smooth decline: no sample-to-sample voltage jump above 10 mV before the final collapse
    body = tr.t < tr.tte - 600.0
    assert np.max(np.abs(np.diff(tr.v_term[body]))) < 0.01


def test_scenario_a_cold_strands_charge():
    warm = run_trajectory(constant_load(0.5))
    cold = run_trajectory(constant_load(0.5, CELSIUS - 20.0))
    assert not cold.censored
    assert cold.z_end > warm.z_end


def test_trajectory_ordering_and_charge():
    s = SimScenario(horizon=12 * 3600.0)
    tr = run_trajectory(s, RngStream(s.seed, 5))
    assert np.all(np.diff(tr.t) > 0.0)
    assert np.all(np.diff(tr.z) <= 0.0)
    assert tr.charge_error(s.battery.q_max, 1.0) <= 1e-3
    assert tr.t[-1] <= tr.tte + s.battery.dt_persist + 1.0 or tr.censored


def test_trajectory_matches_replication():
    s = SimScenario()
    tr = run_trajectory(s, RngStream(s.seed, 3))
    r = run_replication(s, 3)
    assert tr.tte == r.tte and tr.z_end == r.z_end and tr.q_out == r.q_out


def _completed_window_before(tr, v_cut, dt_persist) -> bool:
    start = None
    for t, v in zip(tr.t, tr.v_term):
        if t >= tr.tte:
            break
        if v <= v_cut:
            start = t if start is None else start
            if t - start >= dt_persist:
                return True
        else:
            start = None
    return False


@settings(max_examples=25)
@given(index=st.integers(1, 10_000), cold=st.sampled_from([CELSIUS - 20.0, CELSIUS - 10.0, CELSIUS]))
def test_first_passage_minimality_and_bookkeeping(index, cold):
    s = SimScenario(t_env=cold)
    tr = run_trajectory(s, RngStream(s.seed, index))
    p = s.battery
    assert not _completed_window_before(tr, p.v_cut, p.dt_persist)
    assert np.all(np.diff(tr.z) <= 0.0)
    assert tr.charge_error(p.q_max, 1.0) <= 1e-3


# -- Monte Carlo -------------------------------------------------------------------


def test_single_run_distribution():
    d = run_monte_carlo(SimScenario(), 1)
    assert d.n_runs == 1
    assert d.t05 == d.mean == d.samples[0] == d.quantile(0.5)


def test_worker_layout_is_irrelevant():
    s = SimScenario(seed=77)
    a = run_monte_carlo(s, 40, workers=1)
    b = run_monte_carlo(s, 40, workers=3)
    np.testing.assert_array_equal(a.run_tte, b.run_tte)
    np.testing.assert_array_equal(a.envelope, b.envelope)
    assert a.causes == b.causes


def test_constant_mean_load_gives_equal_samples():
    s = SimScenario(usage=single_mode(2.0, 0.5), t_env=WARM, ablations={"no_burst"})
    d = run_monte_carlo(s, 12)
    assert d.censored_fraction == 0.0
    assert np.ptp(d.samples) <= 1e-3 * d.mean


def test_distribution_summaries():
    d = run_monte_carlo(SimScenario(), 100)
    assert d.survival(0.0) == 1.0
    assert np.all(np.diff(d.survival_s) <= 0.0)
    assert d.quantiles[0.05] <= d.quantiles[0.5] <= d.quantiles[0.95]
    assert d.quantiles[0.05] == empirical_quantile(d.samples, 0.05)
    assert np.all(d.charge_error <= 1e-3)
    assert d.envelope_t[1] - d.envelope_t[0] == GRID_DT_S
    assert np.all(d.envelope[:, 0] <= d.envelope[:, 1]) and np.all(d.envelope[:, 1] <= d.envelope[:, 2])
    assert d.survivors[0] == 100 and np.all(np.diff(d.survivors) <= 0)


def test_censored_runs_excluded():
    s = SimScenario(t_env=WARM, horizon=6 * 3600.0)
    d = run_monte_carlo(s, 60, envelope=False)
    assert 0.0 < d.censored_fraction < 1.0
    assert d.samples.size == np.sum(~d.censored)
    assert np.all(d.samples < s.horizon)
    assert np.all(d.run_tte[d.censored] == s.horizon)


def test_all_censored_raises():
    with pytest.raises(AllRunsCensored):
        run_monte_carlo(SimScenario(horizon=600.0), 5)


def test_faulted_runs_are_counted_not_sampled():
    s = SimScenario()
    runs = run_batch(s, 5)
    runs[2] = RuntimeError("boom")
    d = distribution_from_runs(s, runs, s.battery.q_max)
    assert d.n_faults == 1 and d.samples.size == 4 and d.causes[2] == "fault"


def test_statistic_matches_full_distribution():
    s = SimScenario()
    d = run_monte_carlo(s, 120, envelope=False)
    assert run_statistic(s, 120, "t05") == d.t05
    assert run_statistic(s, 120, "mean") == pytest.approx(d.mean, rel=1e-12)


def test_scenario_validation():
    with pytest.raises(InvalidParameters):
        SimScenario(horizon=0.0)
    with pytest.raises(InvalidParameters):
        SimScenario(ablations={"no_such_thing"})
    assert SimScenario(initial_mode="Gaming").initial_mode == 3


# -- ablations --------------------------------------------------------------------


def test_ablations_agree_without_dynamics_to_remove():
    # tiny polarization resistance with an ordinary time constant, room ambient, light constant load
    cell = BatteryParams(r_p=1e-6, c_p=9e7)
    s = SimScenario(battery=cell, t_env=cell.t_ref, horizon=48 * 3600.0, profile=((1e9, 0.5),),
                    initial=BatteryState(1.0, 0.0, cell.t_ref))
    rows = run_ablation_suite(s, 1)
    ttes = np.array([r.mean for r in rows])
    assert [r.variant for r in rows] == ["full", "isothermal", "no_burst", "no_polarization"]
    assert np.ptp(ttes) <= 1e-3 * ttes[0]


def test_isothermal_runs_at_ambient():
    s = constant_load(0.5, CELSIUS - 10.0, horizon=3600.0, ablations={"isothermal"},
                      initial=BatteryState(1.0, 0.0, WARM))
    tr = run_trajectory(s)
    assert np.all(tr.t_core == CELSIUS - 10.0)


def test_no_polarization_keeps_vp_zero():
    tr = run_trajectory(constant_load(1.0, horizon=3600.0, ablations={"no_polarization"}))
    assert np.all(tr.v_p == 0.0)
