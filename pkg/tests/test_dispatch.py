import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltmesh.dispatch import AgentAction, ExogenousStep, InputError, PowerFlows, allocate, verify_flows
from voltmesh.station import ChargerSession, ChargerState, StationConfig

CFG = StationConfig()


def ev(e, cid=0):
    s = ChargerSession(charger_id=cid, arrival_step=0, departure_step=10, e_demand=40.0, e_init=e, e_cap=40.0)
    return ChargerState.plug_in(s)


def ex(pv=0.0, buy=0.3, sell=0.1):
    return ExogenousStep.midpoint(buy, sell, pv)


def test_midpoint_v2v_price():
    e = ex(buy=0.4, sell=0.1)
    assert e.kappa_v2v == pytest.approx(0.25)


def test_pv_first_then_grid():
    # one EV asks 16 kW with full PV preference, 10 kW of sun: 10 from PV, 6 from grid, nothing sold
    f = allocate([AgentAction(16.0, 0.0, 1.0)], [ev(10.0)], ex(pv=10.0), StationConfig(n_chargers=1))
    assert f.p_pvev[0] == pytest.approx(10.0)
    assert f.p_g2v[0] == pytest.approx(6.0)
    assert f.p_pvg == pytest.approx(0.0)
    assert verify_flows(f, ex(pv=10.0), CFG) == []


def test_pv_split_proportional_to_requests():
    f = allocate([AgentAction(16.0, 0.0, 1.0), AgentAction(8.0, 0.0, 1.0)], [ev(5.0), ev(5.0, 1)],
                 ex(pv=12.0), CFG)
    assert f.p_pvev == pytest.approx([8.0, 4.0])
    assert f.p_g2v == pytest.approx([8.0, 4.0])


def test_v2v_matching_hand_example():
    # EV0 wants 12 kW all via V2V, EV1 offers 8 kW all to V2V: 8 kW matched, 4 kW from grid
    f = allocate([AgentAction(12.0, 1.0, 0.0), AgentAction(-8.0, 1.0, 0.0)], [ev(5.0), ev(30.0, 1)], ex(), CFG)
    assert f.p_v2v_c == pytest.approx([8.0, 0.0])
    assert f.p_v2v_d == pytest.approx([0.0, 8.0])
    assert f.p_g2v == pytest.approx([4.0, 0.0])
    assert f.p_v2g == pytest.approx([0.0, 0.0])


def test_grid_cap_scaling_records_violation():
    cfg = StationConfig(n_chargers=3, g_max=20.0)
    f = allocate([AgentAction(16.0)] * 3, [ev(0.0, j) for j in range(3)], ex(), cfg)
    assert f.p_g2v.sum() == pytest.approx(20.0)
    assert f.grid_violation == pytest.approx(28.0)
    assert verify_flows(f, ex(), cfg) == []


def test_empty_charger_gets_nothing_and_pv_is_sold():
    f = allocate([AgentAction(16.0, 1.0, 1.0)], [ChargerState.empty()], ex(pv=7.0), StationConfig(n_chargers=1))
    assert f.p_ch[0] == 0.0 and f.p_pvg == pytest.approx(7.0)


def test_input_errors():
    with pytest.raises(InputError):
        allocate([AgentAction(np.nan)], [ev(1.0)], ex(), StationConfig(n_chargers=1))
    with pytest.raises(InputError):
        allocate([AgentAction(1.0)] * 2, [ev(1.0)], ex(), StationConfig(n_chargers=1))
    with pytest.raises(ValueError):
        allocate([AgentAction(1.0)], [ev(1.0)], ex(), StationConfig(n_chargers=1), pv_rule="nope")


def test_verify_flows_flags_each_breach():
    f = PowerFlows.zeros(2)
    f.p_ch[:] = [5.0, 0.0]
    f.p_g2v[:] = [4.0, 0.0]   # charge balance off by 1
    f.p_v2v_c[:] = [1.0, 0.0]  # unmatched V2V consumption
    names = {v.constraint for v in verify_flows(f, ex(), CFG)}
    assert "V2V balance" in names
    f.p_g2v[:] = [5.0, 0.0]
    names = {v.constraint for v in verify_flows(f, ex(), CFG)}
    assert "charge balance" in names


def test_headroom_rule_favours_emptier_battery():
    f = allocate([AgentAction(16.0, 0.0, 1.0), AgentAction(16.0, 0.0, 1.0)], [ev(5.0), ev(35.0, 1)],
                 ex(pv=10.0), CFG, pv_rule="headroom")
    assert f.p_pvev[0] > f.p_pvev[1]
    assert f.p_pvev.sum() == pytest.approx(10.0)
    assert verify_flows(f, ex(pv=10.0), CFG) == []


acts = st.tuples(st.floats(-40, 40), st.floats(-0.5, 1.5), st.floats(-0.5, 1.5))


@given(a=st.lists(acts, min_size=3, max_size=3), e=st.lists(st.floats(0, 40), min_size=3, max_size=3),
       occ=st.lists(st.booleans(), min_size=3, max_size=3), pv=st.floats(0, 120), g=st.floats(1, 60),
       rule=st.sampled_from(["request", "headroom"]))
def test_allocate_always_feasible(a, e, occ, pv, g, rule):
    cfg = StationConfig(n_chargers=3, g_max=g)
    states = [ev(x, j) if o else ChargerState.empty() for j, (x, o) in enumerate(zip(e, occ))]
    step = ex(pv=pv)
    f = allocate(np.array(a), states, step, cfg, rule)
    assert verify_flows(f, step, cfg) == []
    assert np.all(f.p_ch[~np.array(occ)] == 0.0)
