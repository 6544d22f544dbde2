import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltmesh.station import (BOUND_TOL, ChargerSession, ChargerState, ContractViolation, InvalidSession,
                              StationConfig, battery_update, charge_limits, clamp_feasible, cycle_aging,
                              degradation, step_battery)

CFG = StationConfig()


def session(**kw):
    base = dict(charger_id=0, arrival_step=0, departure_step=8, e_demand=30.0, e_init=10.0, e_cap=40.0)
    base.update(kw)
    return ChargerSession(**base)


def test_config_defaults_and_validation():
    assert (CFG.n_chargers, CFG.delta_t, CFG.p_ch_max, CFG.pv_capacity) == (2, 0.25, 16.0, 30.0)
    with pytest.raises(ValueError):
        StationConfig(delta_t=0.0)
    with pytest.raises(ValueError):
        StationConfig(n_chargers=0)
    with pytest.raises(ValueError):
        StationConfig(g_max=-1.0)


def test_session_invariants():
    s = session()
    assert s.e_max == s.e_cap and s.duration == 8
    with pytest.raises(InvalidSession):
        session(arrival_step=5, departure_step=5)
    with pytest.raises(InvalidSession):
        session(e_init=50.0)
    with pytest.raises(InvalidSession):
        session(e_demand=45.0)
    with pytest.raises(InvalidSession):
        session(eta_ch=1.2)


def test_battery_update_hand_values():
    # 10 kWh + 16 kW * 0.95 * 0.25 h = 13.8 kWh
    assert battery_update(10.0, 16.0, 0.0, 0.95, 0.95, 0.25) == pytest.approx(13.8, abs=1e-12)
    # 10 kWh - 16 kW * 0.25 h / 0.95
    assert battery_update(10.0, 0.0, 16.0, 0.95, 0.95, 0.25) == pytest.approx(10.0 - 4.0 / 0.95, abs=1e-12)


def test_charge_limits_near_full_and_empty():
    ch, dis = charge_limits(39.0, 0.0, 40.0, 0.95, 0.95, True, CFG)
    assert ch == pytest.approx(1.0 / (0.95 * 0.25))
    assert dis == 16.0
    ch, dis = charge_limits(0.5, 0.0, 40.0, 0.95, 0.95, True, CFG)
    assert ch == 16.0 and dis == pytest.approx(0.5 * 0.95 / 0.25)
    ch, dis = charge_limits(np.array([5.0]), 0.0, 40.0, 0.95, 0.95, np.array([False]), CFG)
    assert ch[0] == 0.0 and dis[0] == 0.0


def test_cycle_aging_hand_values():
    # one full cycle's worth of half-throughput: |16*0.95*0.25| = 3.8 kWh -> EFC = 0.5*3.8/40
    efc, age, cost = cycle_aging(16.0, 0.0, 0.95, 0.95, 40.0, 3000.0, 6000.0, 0.25)
    assert efc == pytest.approx(0.5 * 3.8 / 40.0)
    assert age == pytest.approx(efc / 3000.0)
    assert cost == pytest.approx(age * 6000.0)
    d = degradation(0.0, 0.0, session(), 0.25)
    assert d.efc == d.age_frac == d.cost == 0.0


def test_step_battery_contract():
    s = session(e_init=39.5)
    st0 = ChargerState.plug_in(s)
    with pytest.raises(ContractViolation):
        step_battery(st0, 16.0, 0.0, CFG)
    p, _ = clamp_feasible(st0, 16.0, 0.0, CFG)
    st1 = step_battery(st0, p, 0.0, CFG)
    assert st1.energy == pytest.approx(40.0) and st1.remaining_steps == 7
    with pytest.raises(ValueError):
        step_battery(st0, 1.0, 1.0, CFG)
    with pytest.raises(ContractViolation):
        step_battery(ChargerState.empty(), 1.0, 0.0, CFG)


@given(e=st.floats(0.0, 40.0), p=st.floats(-50.0, 50.0))
def test_clamped_step_stays_in_window(e, p):
    st0 = ChargerState(e, 4, True, session(e_init=0.0, e_demand=0.0))
    ch, dis = clamp_feasible(st0, max(p, 0.0), max(-p, 0.0), CFG)
    st1 = step_battery(st0, ch, dis, CFG)
    assert -BOUND_TOL <= st1.energy <= 40.0 + BOUND_TOL
    assert ch <= CFG.p_ch_max and dis <= CFG.p_disch_max
