"""Multi-agent charging-station MDP: observations, transition, rewards, rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dispatch import ExogenousStep, PowerFlows, allocate
from .metrics import (StepCost, completion_dispersion, completion_ratio, fairness, fap_and_u, step_cost)
from .scenario import Scenario
from .station import BOUND_TOL, ChargerState, ContractViolation, battery_update, cycle_aging

OBS_FIELDS = ("e", "t_rem", "e_dem", "k_buy", "k_sell", "pv_gen")
OBS_DIM = len(OBS_FIELDS)
ACT_DIM = 3
FAIRNESS_SIGNS = ("minus", "plus", "off")


class PolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentObservation:
    e: float = 0.0
    t_rem: float = 0.0
    e_dem: float = 0.0
    k_buy: float = 0.0
    k_sell: float = 0.0
    pv_gen: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.e, self.t_rem, self.e_dem, self.k_buy, self.k_sell, self.pv_gen])


@dataclass(frozen=True)
class RewardConfig:
    xi: float = 0.5
    rho: float = 1.0
    grid_penalty_coeff: float = 1.0
    fairness_sign: str = "minus"
    fap_floor: bool = True

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi}")
        if self.grid_penalty_coeff < 0:
            raise ValueError("grid_penalty_coeff must be >= 0")
        if self.fairness_sign not in FAIRNESS_SIGNS:
            raise ValueError(f"fairness_sign must be one of {FAIRNESS_SIGNS}")


@dataclass(frozen=True)
class FaultSpec:
    fault_step: int
    faulty_chargers: tuple = ()

    def validate(self, n_chargers: int) -> "FaultSpec":
        bad = [j for j in self.faulty_chargers if not 0 <= j < n_chargers]
        if bad:
            raise ValueError(f"faulty chargers {bad} outside 0..{n_chargers - 1}")
        return self


@dataclass
class TransitionRecord:
    obs: np.ndarray          # (n, OBS_DIM)
    actions: np.ndarray      # (n, ACT_DIM)
    rewards: np.ndarray      # (n,)
    next_obs: np.ndarray     # (n, OBS_DIM)
    done: bool = False

    def __post_init__(self):
        n = self.obs.shape[0]
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.next_obs.shape[0] == n):
            raise ValueError("transition arity mismatch")


@dataclass
class StationState:
    """Snapshot of every charger plus the current exogenous inputs.

    Battery parameters are mirrored into arrays for vectorised stepping;
    empty chargers carry neutral values (unit efficiency, unit capacity).
    """
    t: int
    ex: Optional[ExogenousStep]
    energy: np.ndarray
    remaining_steps: np.ndarray
    occupied: np.ndarray
    session_idx: np.ndarray
    e_min: np.ndarray
    e_max: np.ndarray
    e_cap: np.ndarray
    e_dem: np.ndarray
    eta_ch: np.ndarray
    eta_disch: np.ndarray
    l_cyc: np.ndarray
    kappa_batt: np.ndarray
    sessions: tuple = field(repr=False, default=())
    next_arrival: int = 0

    @property
    def n(self) -> int:
        return len(self.energy)

    def copy(self) -> "StationState":
        arrays = {k: getattr(self, k).copy() for k in _ARRAY_FIELDS}
        return replace(self, **arrays)

    def charger(self, j: int) -> ChargerState:
        if not self.occupied[j]:
            return ChargerState.empty()
        s = self.sessions[self.session_idx[j]]
        return ChargerState(float(self.energy[j]), int(self.remaining_steps[j]), True, s)


_ARRAY_FIELDS = ("energy", "remaining_steps", "occupied", "session_idx", "e_min", "e_max", "e_cap",
                 "e_dem", "eta_ch", "eta_disch", "l_cyc", "kappa_batt")


def _clear(state: StationState, idx) -> None:
    state.energy[idx] = 0.0
    state.remaining_steps[idx] = 0
    state.occupied[idx] = False
    state.session_idx[idx] = -1
    state.e_min[idx] = state.e_max[idx] = state.e_dem[idx] = 0.0
    state.e_cap[idx] = state.eta_ch[idx] = state.eta_disch[idx] = state.l_cyc[idx] = 1.0
    state.kappa_batt[idx] = 0.0


def observe(station: StationState, j: int, delta_t: float) -> AgentObservation:
    if not 0 <= j < station.n:
        raise IndexError(f"charger {j} out of range 0..{station.n - 1}")
    if not station.occupied[j]:
        return AgentObservation()
    ex = station.ex
    return AgentObservation(
        float(station.energy[j]), float(station.remaining_steps[j] * delta_t), float(station.e_dem[j]),
        ex.kappa_buy, ex.kappa_sell, ex.pv_gen,
    )


def observe_all(station: StationState, delta_t: float) -> np.ndarray:
    """Joint observation matrix, one row per charger."""
    obs = np.zeros((station.n, OBS_DIM))
    occ = station.occupied
    if occ.any():
        ex = station.ex
        obs[occ, 0] = station.energy[occ]
        obs[occ, 1] = station.remaining_steps[occ] * delta_t
        obs[occ, 2] = station.e_dem[occ]
        obs[occ, 3] = ex.kappa_buy
        obs[occ, 4] = ex.kappa_sell
        obs[occ, 5] = ex.pv_gen
    return obs


@dataclass
class StepResult:
    state: StationState
    rewards: np.ndarray
    flows: PowerFlows
    cost: StepCost
    departures: list
    done: bool
    u: np.ndarray
    psi: np.ndarray


class StationEnv:
    """Charging station driven by a scenario.

    ``step`` never mutates its input state, so snapshots can be replayed.
    """

    def __init__(self, scenario: Scenario, reward: RewardConfig = RewardConfig(), pv_rule: str = "request"):
        self.scenario = scenario
        self.cfg = scenario.station
        self.reward = reward
        self.pv_rule = pv_rule
        self._sessions = tuple(scenario.sessions)

    @property
    def n(self) -> int:
        return self.cfg.n_chargers

    @property
    def horizon(self) -> int:
        return self.scenario.horizon

    def reset(self) -> StationState:
        n = self.n
        st = StationState(
            t=0, ex=self.scenario.exogenous(0) if self.horizon else None,
            energy=np.zeros(n), remaining_steps=np.zeros(n, dtype=int), occupied=np.zeros(n, dtype=bool),
            session_idx=np.full(n, -1), e_min=np.zeros(n), e_max=np.zeros(n), e_cap=np.ones(n),
            e_dem=np.zeros(n), eta_ch=np.ones(n), eta_disch=np.ones(n), l_cyc=np.ones(n),
            kappa_batt=np.zeros(n), sessions=self._sessions,
        )
        self._arrive(st)
        return st

    def _arrive(self, st: StationState) -> None:
        k = st.next_arrival
        while k < len(self._sessions) and self._sessions[k].arrival_step <= st.t:
            s = self._sessions[k]
            j = s.charger_id
            if s.arrival_step == st.t:
                if st.occupied[j]:
                    raise ContractViolation(f"charger {j} still occupied at arrival of session {s.session_id}")
                st.energy[j] = s.e_init
                st.remaining_steps[j] = s.departure_step - st.t
                st.occupied[j] = True
                st.session_idx[j] = k
                st.e_min[j], st.e_max[j], st.e_cap[j], st.e_dem[j] = s.e_min, s.e_max, s.e_cap, s.e_demand
                st.eta_ch[j], st.eta_disch[j] = s.eta_ch, s.eta_disch
                st.l_cyc[j], st.kappa_batt[j] = s.l_cyc, s.kappa_batt
            k += 1
        st.next_arrival = k

    def observe(self, state: StationState) -> np.ndarray:
        return observe_all(state, self.cfg.delta_t)

    def step(self, state: StationState, actions) -> StepResult:
        if state.t >= self.horizon:
            raise StopIteration("scenario exhausted")
        cfg, rw = self.cfg, self.reward
        dt = cfg.delta_t
        ex = state.ex
        occ = state.occupied
        n_t = int(occ.sum())

        flows = allocate(actions, state, ex, cfg, self.pv_rule)
        _, _, deg = cycle_aging(flows.p_ch, flows.p_disch, state.eta_ch, state.eta_disch,
                                state.e_cap, state.l_cyc, state.kappa_batt, dt)
        deg = np.where(occ, deg, 0.0)
        energy = battery_update(state.energy, flows.p_ch, flows.p_disch, state.eta_ch, state.eta_disch, dt)
        lo, hi = state.e_min, state.e_max
        bad = occ & ((energy < lo - BOUND_TOL) | (energy > hi + BOUND_TOL))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise ContractViolation(f"t={state.t} charger {j}: energy {energy[j]:.12g} outside [{lo[j]}, {hi[j]}]")
        energy = np.where(occ, np.clip(energy, lo, hi), 0.0)
        cost = step_cost(flows, ex, deg, dt, n_t)

        rewards = np.zeros(self.n)
        u = np.zeros(self.n)
        psi = np.zeros(self.n)
        if n_t:
            t_rem = state.remaining_steps[occ] * dt
            _, u_act = fap_and_u(state.e_dem[occ], energy[occ], t_rem, rw.rho, cfg.p_ch_max, rw.fap_floor)
            psi_act = fairness(u_act)
            u[occ], psi[occ] = u_act, psi_act
            if rw.fairness_sign == "minus":
                r_user = u_act - psi_act
            elif rw.fairness_sign == "plus":
                r_user = u_act + psi_act
            else:
                r_user = u_act
            r_cost = -cost.total / n_t
            r_grid = -rw.grid_penalty_coeff * flows.grid_violation
            rewards[occ] = rw.xi * r_cost + (1.0 - rw.xi) * r_user + r_grid

        nxt = state.copy()
        nxt.energy = energy
        nxt.remaining_steps = np.where(occ, state.remaining_steps - 1, 0)
        nxt.t = state.t + 1
        departures = []
        leaving = occ & (nxt.remaining_steps <= 0)
        for j in np.flatnonzero(leaving):
            departures.append((self._sessions[state.session_idx[j]], float(energy[j])))
        if leaving.any():
            _clear(nxt, leaving)
        done = nxt.t >= self.horizon
        nxt.ex = None if done else self.scenario.exogenous(nxt.t)
        if not done:
            self._arrive(nxt)
        return StepResult(nxt, rewards, flows, cost, departures, done, u, psi)


# -- faults --------------------------------------------------------------------

def observation_bounds(scenario: Scenario):
    """Per-field (low, high) ranges used for corruption draws and input scaling."""
    caps = [s.e_cap for s in scenario.sessions] or [40.0]
    stays = [s.duration for s in scenario.sessions] or [1]
    dt = scenario.station.delta_t
    k_max = float(max(scenario.buy.max(initial=0.0), 1e-6))
    high = np.array([max(caps), max(stays) * dt, max(caps), k_max, k_max, scenario.station.pv_capacity])
    return np.zeros(OBS_DIM), high


def corrupt_observations(obs: np.ndarray, fault: FaultSpec, rng: np.random.Generator, bounds,
                         t: Optional[int] = None) -> np.ndarray:
    """Replace the faulty chargers' rows by fresh uniform draws within ``bounds``."""
    if not fault.faulty_chargers or (t is not None and t < fault.fault_step):
        return obs
    low, high = bounds
    out = obs.copy()
    idx = np.asarray(fault.faulty_chargers, dtype=int)
    out[idx] = rng.uniform(low, high, size=(len(idx), obs.shape[1]))
    return out


# -- policies and rollouts -------------------------------------------------------

class DecentralizedPolicy:
    """Each agent sees only its own observation row."""

    decentralized = True

    def __init__(self, agent_fns: Sequence[Callable]):
        self.agent_fns = list(agent_fns)

    def __call__(self, obs: np.ndarray, state: StationState) -> np.ndarray:
        return np.array([np.asarray(f(obs[j]), dtype=float) for j, f in enumerate(self.agent_fns)])


def as_policy(policies):
    if callable(policies) and not isinstance(policies, (list, tuple)):
        return policies
    return DecentralizedPolicy(policies)


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    fault_report: Optional[dict] = None
    delta_t: float = 0.25

    @property
    def total_cost(self) -> float:
        return float(sum(s["cost"]["total"] for s in self.steps))

    @property
    def total_reward(self) -> float:
        return float(sum(sum(s["rewards"]) for s in self.steps))

    def metrics(self) -> dict:
        return {
            "total_cost": self.total_cost,
            "total_reward": self.total_reward,
            "completion": completion_ratio(self.outcomes),
            "fairness_dispersion": completion_dispersion(self.outcomes),
            "n_sessions": len(self.outcomes),
        }

    def to_jsonl(self, path) -> Path:
        p = Path(path)
        with open(p, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")
        return p


def rollout(scenario: Scenario, policies, fault: Optional[FaultSpec] = None, seed: int = 0,
            reward: RewardConfig = RewardConfig(), pv_rule: str = "request",
            keep_transitions: bool = False) -> EpisodeTrace:
    """Run one episode. Deterministic given ``seed`` and deterministic policies.

    With a fault, policies act on corrupted observations; the healthy agents'
    actions are also computed from clean observations and compared, giving
    the equality report stored in ``trace.fault_report``.
    """
    policy = as_policy(policies)
    env = StationEnv(scenario, reward, pv_rule)
    rng = np.random.default_rng(seed)
    if hasattr(policy, "reset"):
        policy.reset(scenario)
    bounds = observation_bounds(scenario)
    if fault is not None:
        fault.validate(env.n)
        healthy = np.setdiff1d(np.arange(env.n), np.asarray(fault.faulty_chargers, dtype=int))
        report = {"fault_step": fault.fault_step, "faulty_chargers": list(fault.faulty_chargers),
                  "healthy_chargers": healthy.tolist(), "steps_compared": 0, "changed_steps": 0,
                  "changed_actions": 0}
    trace = EpisodeTrace(delta_t=scenario.station.delta_t)
    state = env.reset()
    obs = env.observe(state)
    while state.t < env.horizon:
        seen = obs
        if fault is not None and state.t >= fault.fault_step:
            seen = corrupt_observations(obs, fault, rng, bounds, state.t)
        actions = np.asarray(policy(seen, state), dtype=float).reshape(env.n, ACT_DIM)
        if not np.all(np.isfinite(actions)):
            raise PolicyError(f"non-finite action at t={state.t}: {actions.tolist()} from obs {seen.tolist()}")
        if fault is not None and state.t >= fault.fault_step:
            clean = np.asarray(policy(obs, state), dtype=float).reshape(env.n, ACT_DIM)
            diff = np.any(clean[healthy] != actions[healthy], axis=1)
            report["steps_compared"] += 1
            report["changed_actions"] += int(diff.sum())
            report["changed_steps"] += int(diff.any())
        res = env.step(state, actions)
        next_obs = env.observe(res.state)
        if keep_transitions:
            trace.transitions.append(TransitionRecord(obs, actions, res.rewards, next_obs, res.done))
        trace.steps.append({
            "t": state.t,
            "n_active": res.cost.n_active,
            "actions": actions.tolist(),
            "rewards": res.rewards.tolist(),
            "energy": res.state.energy.tolist(),
            "flows": res.flows.to_dict(),
            "cost": {"energy": res.cost.energy_cost, "pv_sale": res.cost.pv_sale,
                     "battery": res.cost.battery_cost, "total": res.cost.total},
        })
        trace.outcomes.extend(res.departures)
        state, obs = res.state, next_obs
    if fault is not None:
        trace.fault_report = report
    return trace
