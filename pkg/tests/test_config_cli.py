import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonebatt.cli import EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME, bundled, fmt, main
from phonebatt.config import RunConfig, from_dict, load_config, parse_config_text, serialize, to_dict
from phonebatt.errors import ParseError, ValidationError


def _leaves(d, prefix=""):
    if isinstance(d, dict):
        for k, v in d.items():
            yield from _leaves(v, f"{prefix}.{k}" if prefix else k)
    else:
        yield prefix, d


def changed_paths(a: dict, b: dict) -> set:
    la, lb = dict(_leaves(a)), dict(_leaves(b))
    return {k for k in la if la[k] != lb.get(k)}


# -- configuration ----------------------------------------------------------------------


def test_empty_file_is_the_bundled_baseline(tmp_path):
    f = tmp_path / "empty.json"
    f.write_text("")
    assert load_config(f) == load_config(bundled("baseline.json")) == load_config(None) == RunConfig()
    assert parse_config_text("{}") == RunConfig()


def test_negative_cutoff_names_its_path():
    with pytest.raises(ValidationError) as exc:
        parse_config_text('{"battery": {"v_cut": -1}}')
    assert [p for p, _ in exc.value.violations] == ["battery.v_cut"]
    assert "battery.v_cut" in str(exc.value)


def test_all_violations_reported_together():
    with pytest.raises(ValidationError) as exc:
        parse_config_text('{"battery": {"v_cut": -1, "q_max": 0}, "bogus": 1}')
    assert {p for p, _ in exc.value.violations} == {"battery.v_cut", "battery.q_max", "bogus"}


def test_debounce_must_exceed_max_step():
    with pytest.raises(ValidationError, match="battery.dt_persist"):
        parse_config_text('{"battery": {"dt_persist": 1.0}}')
    assert parse_config_text('{"battery": {"dt_persist": 1.5}}').scenario.battery.dt_persist == 1.5


def test_ambient_override_touches_nothing_else():
    cfg = parse_config_text('{"scenario": {"t_env": 253.15}}')
    # the initial core temperature follows ambient unless given explicitly
    assert changed_paths(to_dict(cfg), to_dict(RunConfig())) == {"scenario.t_env", "scenario.initial.t_core"}
    pinned = parse_config_text('{"scenario": {"t_env": 253.15, "initial": {"t_core": 273.15}}}')
    assert changed_paths(to_dict(pinned), to_dict(RunConfig())) == {"scenario.t_env"}


def test_bad_json_is_a_parse_error():
    with pytest.raises(ParseError, match="line 1"):
        parse_config_text("{nope")


overrides = st.fixed_dictionaries({
    "seed": st.integers(0, 2**31 - 1),
    "n_runs": st.integers(1, 10_000),
    "scenario": st.fixed_dictionaries({"t_env": st.floats(230.0, 330.0), "horizon": st.floats(60.0, 1e6)}),
    "battery": st.fixed_dictionaries({"q_max": st.floats(0.5, 5.0), "r_ref": st.floats(0.01, 0.5),
                                      "dt_persist": st.floats(1.01, 10.0)}),
    "usage": st.fixed_dictionaries({"multipliers": st.fixed_dictionaries(
        {"rho_b": st.floats(0.05, 1.0), "rho_bg": st.floats(0.05, 1.0), "rho_ws": st.floats(1.0, 2.0)})}),
    "throttle": st.one_of(st.none(), st.fixed_dictionaries({"kappa": st.floats(0.05, 1.0),
                                                             "u_min": st.floats(0.01, 1.0)})),
})


@settings(max_examples=40)
@given(overrides)
def test_serialize_round_trip(d):
    cfg = from_dict(d)
    again = parse_config_text(serialize(cfg))
    assert again == cfg
    assert serialize(again) == serialize(cfg)


def test_fmt_is_stable():
    assert fmt(1.0 / 3.0) == "0.333333333"
    assert fmt(True) == "1" and fmt(7) == "7" and fmt(float("inf")) == "inf" and fmt(None) == ""


# -- command line -----------------------------------------------------------------------


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_simulate_writes_results(tmp_path):
    assert main(["simulate", "--runs", "20", "--out", str(tmp_path)]) == 0
    assert set(_files(tmp_path)) == {"tte_samples.csv", "survival.csv", "soc_envelope.csv", "summary.json"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["command"] == "simulate" and summary["n_runs"] == 20
    lines = (tmp_path / "tte_samples.csv").read_text().splitlines()
    assert lines[0] == "run_index,tte_s,cause,censored" and len(lines) == 21


def test_repeat_and_worker_count_are_byte_identical(tmp_path):
    runs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 3)):
        out = tmp_path / name
        assert main(["simulate", "--runs", "12", "--seed", "9", "--workers", str(workers), "--out", str(out)]) == 0
        runs.append(_files(out))
    assert runs[0] == runs[1] == runs[2]


def test_identify_output_feeds_simulate(tmp_path):
    ident = tmp_path / "ident"
    assert main(["identify", "--out", str(ident)]) == 0
    params = ident / "identified_params.json"
    assert set(json.loads(params.read_text())) == {"battery"}
    cfg = load_config(params)
    assert cfg.scenario.battery.r_ref == json.loads(params.read_text())["battery"]["r_ref"]
    assert main(["simulate", "--config", str(params), "--runs", "5", "--out", str(tmp_path / "sim")]) == 0


def test_validate_bundled_reference(tmp_path):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mape_pct"] == 0.0 and summary["delta_tau_s"] == 0.0


def test_unknown_command_prints_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"battery": {"v_cut": -1}}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "battery.v_cut" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    short = tmp_path / "short.json"
    short.write_text('{"scenario": {"horizon": 600}}')
    assert main(["simulate", "--config", str(short), "--runs", "3", "--out", str(tmp_path / "y")]) == EXIT_RUNTIME
    assert "AllRunsCensored" in capsys.readouterr().err
