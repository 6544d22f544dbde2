"""Resolve one step of agent requests into station power flows.

Three EVs: one wants solar, one offers energy to its neighbours, one buys
from the grid. The printout shows how the allocator splits the requests.
"""

import numpy as np

from voltmesh import AgentAction, ExogenousStep, StationConfig, allocate, verify_flows
from voltmesh.station import ChargerSession, ChargerState

cfg = StationConfig(n_chargers=3, p_ch_max=11.0, p_disch_max=11.0, g_max=40.0)
sessions = [
    ChargerSession(charger_id=0, arrival_step=0, departure_step=8, e_demand=30.0, e_init=12.0),
    ChargerSession(charger_id=1, arrival_step=0, departure_step=8, e_demand=20.0, e_init=32.0),
    ChargerSession(charger_id=2, arrival_step=0, departure_step=8, e_demand=35.0, e_init=8.0),
]
states = [ChargerState.plug_in(s) for s in sessions]
actions = [AgentAction(11.0, 0.0, 1.0), AgentAction(-8.0, 1.0, 0.0), AgentAction(11.0, 1.0, 0.0)]
ex = ExogenousStep.midpoint(kappa_buy=0.32, kappa_sell=0.08, pv_gen=6.5)

flows = allocate(actions, states, ex, cfg)
for name, values in flows.to_dict().items():
    print(f"{name:15s} {np.round(values, 3)}")
print("violations:", verify_flows(flows, ex, cfg) or "none")
