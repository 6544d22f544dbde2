import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltmesh.scenario import (DEFAULT_CONFIG, PRICES_HEADER, SESSIONS_HEADER, SOLAR_HEADER, ScenarioError,
                               format_config, generate_synthetic, load_scenario, load_scenario_dir, parse_config,
                               parse_synthetic_spec, save_scenario, synthetic_from_spec)


def write(tmp_path, sessions, prices, solar):
    (tmp_path / "sessions.csv").write_text(sessions)
    (tmp_path / "prices.csv").write_text(prices)
    (tmp_path / "solar.csv").write_text(solar)
    return tmp_path


PRICES = "step,buy,sell\n0,0.3,0.1\n1,0.3,0.1\n2,0.2,0.1\n3,0.2,0.1\n"
SOLAR = "step,gen_kw\n0,0\n1,5\n2,5\n3,0\n"
HEAD = ",".join(SESSIONS_HEADER) + "\n"


def test_headers_are_exact():
    assert HEAD.strip() == "session_id,charger_id,arrival_step,departure_step,e_demand_kwh,e_init_kwh,e_cap_kwh"
    assert PRICES_HEADER == ["step", "buy", "sell"] and SOLAR_HEADER == ["step", "gen_kw"]


def test_minimal_file_set(tmp_path):
    write(tmp_path, HEAD + "0,0,0,4,20,5,40\n", PRICES, SOLAR)
    sc = load_scenario_dir(tmp_path)
    assert len(sc.sessions) == 1 and sc.horizon == 4
    assert sc.v2v == pytest.approx([0.2, 0.2, 0.15, 0.15])


def test_overlap_error_names_charger_and_rows(tmp_path):
    write(tmp_path, HEAD + "0,1,0,3,20,5,40\n1,1,2,4,20,5,40\n", PRICES, SOLAR)
    with pytest.raises(ScenarioError, match=r"rows 2 and 3.*charger 1"):
        load_scenario_dir(tmp_path)


@pytest.mark.parametrize("sessions,prices,solar,pattern", [
    (HEAD + "0,0,0,4,20,5,40\n", PRICES.replace("0.3,0.1\n1", "-0.3,0.1\n1"), SOLAR, "line 2"),
    (HEAD + "0,0,0,4,20,5,40\n", PRICES, "step,gen_kw\n0,0\n1,5\n", "length mismatch"),
    (HEAD + "0,0,0,4,-20,5,40\n", PRICES, SOLAR, "line 2: negative"),
    (HEAD + "0,0,0,4,20,5\n", PRICES, SOLAR, "line 2: expected 7 fields"),
    (HEAD + "0,0,0,9,20,5,40\n", PRICES, SOLAR, "outside horizon"),
    (HEAD + "0,0,0,4,20,x,40\n", PRICES, SOLAR, "e_init_kwh is not a valid float"),
    ("id,charger\n", PRICES, SOLAR, "header"),
])
def test_parse_errors(tmp_path, sessions, prices, solar, pattern):
    write(tmp_path, sessions, prices, solar)
    with pytest.raises(ScenarioError, match=pattern):
        load_scenario_dir(tmp_path)


def test_round_trip(tmp_path):
    sc = generate_synthetic(3, 2, seed=7)
    save_scenario(sc, tmp_path / "s")
    assert load_scenario_dir(tmp_path / "s") == sc


def test_generator_properties():
    a, b = generate_synthetic(4, 2, seed=3), generate_synthetic(4, 2, seed=3)
    assert a == b
    assert a != generate_synthetic(4, 2, seed=4)
    assert np.all(a.sell <= a.v2v) and np.all(a.v2v <= a.buy)
    hours = (np.arange(a.horizon) % a.steps_per_day) * a.station.delta_t
    night = (hours < 6.0) | (hours >= 18.0)
    assert np.all(a.pv[night] == 0.0) and a.pv.max() <= a.station.pv_capacity
    assert set(np.unique(a.buy)) <= {0.15, 0.25, 0.45}
    for s in a.sessions:
        assert 5.0 - 1e-9 <= s.e_demand - s.e_init or s.e_demand == s.e_cap
        assert s.e_init >= s.e_cap * 0.1 - 1e-9


def test_config_text_round_trip():
    cfg = dict(DEFAULT_CONFIG, xi=0.3, n_chargers=6)
    assert parse_config(format_config(cfg)) == cfg
    with pytest.raises(ScenarioError, match="unknown key"):
        parse_config("bogus=1")
    with pytest.raises(ScenarioError, match="cannot parse"):
        parse_config("xi=abc")


def test_synthetic_spec():
    assert parse_synthetic_spec("synthetic:2x96") == (2, 96)
    with pytest.raises(ScenarioError):
        parse_synthetic_spec("synthetic:2by96")
    sc = synthetic_from_spec("synthetic:3x50", seed=1)
    assert sc.horizon == 50 and sc.n_chargers == 3


@settings(max_examples=150)
@given(data=st.binary(max_size=300), which=st.sampled_from(["sessions.csv", "prices.csv", "solar.csv"]))
def test_fuzzed_files_fail_cleanly(tmp_path_factory, data, which):
    d = tmp_path_factory.mktemp("fz")
    write(d, HEAD + "0,0,0,4,20,5,40\n", PRICES, SOLAR)
    (d / which).write_bytes(data)
    try:
        load_scenario_dir(d)
    except ScenarioError:
        pass


@settings(max_examples=150)
@given(text=st.text(alphabet="0123456789,.-\n xe\"", max_size=200))
def test_fuzzed_session_rows_fail_cleanly(tmp_path_factory, text):
    d = tmp_path_factory.mktemp("fz")
    write(d, HEAD + text, PRICES, SOLAR)
    try:
        sc = load_scenario_dir(d)
    except ScenarioError:
        return
    assert sc.validate() is sc
