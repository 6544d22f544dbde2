"""Comparison policies: uncontrolled charging, rolling-horizon LP, centralized DQN."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .dispatch import AgentAction, PowerFlows
from .env import OBS_DIM, RewardConfig, StationEnv, StationState
from .lp import LinearProgram, LPResult, solve
from .maddpg import ReplayBuffer, _dump_diagnostics, obs_scale_for
from .metrics import completion_ratio
from .nn import MLP, Adam, TrainingDivergence, load_networks, save_networks
from .scenario import Scenario
from .station import StationConfig

log = logging.getLogger(__name__)


# -- uncontrolled ------------------------------------------------------------------

def uncontrolled_action(obs_row, station: StationConfig) -> AgentAction:
    """Full charging power whenever an EV is plugged in, no PV/V2V preference."""
    if not np.any(np.asarray(obs_row, dtype=float)):
        return AgentAction()
    return AgentAction(station.p_ch_max, 0.0, 0.0)


class UncontrolledPolicy:
    decentralized = True

    def __init__(self, station: StationConfig):
        self.station = station

    def __call__(self, obs, state=None) -> np.ndarray:
        return np.array([uncontrolled_action(o, self.station).as_array() for o in np.asarray(obs)])


def uncontrolled_policy(obs, station: StationConfig):
    """Single observation row -> AgentAction; a joint matrix -> action matrix."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        return uncontrolled_action(obs, station)
    return UncontrolledPolicy(station)(obs)


# -- rolling-horizon optimization ------------------------------------------------------

WINDOW_MODES = ("longest_parking", "fixed")
FORECAST_MODES = ("perfect", "persistence")
TRIGGERS = ("every_step", "on_arrival")
FLOW_VARS = ("pvev", "v2vc", "g2v", "v2g", "v2vd")


@dataclass(frozen=True)
class RhoConfig:
    window: str = "longest_parking"
    k: int = 0
    forecast: str = "perfect"
    trigger: str = "every_step"
    rho: float = 1.0
    hard_demand: bool = False

    def __post_init__(self):
        if self.window not in WINDOW_MODES:
            raise ValueError(f"window must be one of {WINDOW_MODES}")
        if self.window == "fixed" and self.k < 1:
            raise ValueError("fixed window needs k >= 1")
        if self.forecast not in FORECAST_MODES:
            raise ValueError(f"forecast must be one of {FORECAST_MODES}")
        if self.trigger not in TRIGGERS:
            raise ValueError(f"trigger must be one of {TRIGGERS}")


@dataclass
class Forecast:
    buy: np.ndarray
    sell: np.ndarray
    pv: np.ndarray

    def __len__(self):
        return len(self.buy)


def make_forecast(scenario: Scenario, t: int, length: int, mode: str = "perfect") -> Forecast:
    """Exogenous series for steps ``t .. t+length-1``.

    ``persistence`` repeats the previous day's value at the same step; the
    current step and anything on the first day use the true value.
    """
    idx = np.arange(t, min(t + length, scenario.horizon))
    src = idx.copy()
    if mode == "persistence":
        spd = scenario.steps_per_day
        back = idx - spd
        use = (idx > t) & (back >= 0)
        src = np.where(use, back, idx)
    elif mode != "perfect":
        raise ValueError(f"unknown forecast mode {mode!r}")
    return Forecast(scenario.buy[src].copy(), scenario.sell[src].copy(), scenario.pv[src].copy())


@dataclass
class RhoPlan:
    actions: np.ndarray
    flows: PowerFlows
    result: Optional[LPResult]
    window: int
    relaxed: bool = False
    schedule: Optional[list] = field(default=None, repr=False)


class _WindowModel:
    """Variable layout and constraint rows of one window program."""

    def __init__(self, state: StationState, fc: Forecast, cfg: RhoConfig, station: StationConfig,
                 kappa_max: float, soft: bool):
        dt = station.delta_t
        self.evs = np.flatnonzero(state.occupied)
        rem = state.remaining_steps[self.evs].astype(int)
        if cfg.window == "fixed":
            W = cfg.k
        else:
            W = int(rem.max())
        W = min(W, len(fc))
        self.W = W
        self.steps = np.minimum(rem, W)
        present = np.array([(self.steps > k).sum() for k in range(W)])
        # flows for (ev, k, var) then pvg per k then unmet per ev
        self.base = {}
        nv = 0
        for a, i in enumerate(self.evs):
            for k in range(self.steps[a]):
                self.base[(a, k)] = nv
                nv += len(FLOW_VARS)
        self.pvg0 = nv
        nv += W
        self.u0 = nv
        nv += len(self.evs)
        self.nv = nv

        c = np.zeros(nv)
        lb = np.zeros(nv)
        ub = np.full(nv, np.inf)
        rows, lo, hi = [], [], []

        def row():
            r = np.zeros(nv)
            rows.append(r)
            return r

        for a, i in enumerate(self.evs):
            eta_c, eta_d = state.eta_ch[i], state.eta_disch[i]
            age = 0.5 * state.kappa_batt[i] / (state.e_cap[i] * state.l_cyc[i])
            e0 = state.energy[i]
            cum = np.zeros(nv)
            for k in range(self.steps[a]):
                b = self.base[(a, k)]
                pvev, v2vc, g2v, v2g, v2vd = range(b, b + 5)
                # cycle aging of the gross throughput; exact once charge and discharge are exclusive
                c[[pvev, v2vc, g2v]] = age * eta_c * dt
                c[[v2g, v2vd]] = age * dt / eta_d
                c[g2v] += fc.buy[k] * dt
                c[v2g] -= fc.sell[k] * dt
                ub[[pvev, v2vc, g2v]] = station.p_ch_max
                ub[pvev] = min(station.p_ch_max, fc.pv[k])
                ub[[v2g, v2vd]] = station.p_disch_max
                if present[k] < 2:
                    ub[[v2vc, v2vd]] = 0.0
                r = row()
                r[[pvev, v2vc, g2v]] = 1.0
                lo.append(-np.inf)
                hi.append(station.p_ch_max)
                if present[k] >= 2:
                    r = row()
                    r[[v2g, v2vd]] = 1.0
                    lo.append(-np.inf)
                    hi.append(station.p_disch_max)
                cum[[pvev, v2vc, g2v]] = eta_c * dt
                cum[[v2g, v2vd]] = -dt / eta_d
                rows.append(cum.copy())
                lo.append(state.e_min[i] - e0)
                hi.append(state.e_max[i] - e0)
            # the target also binds after it is reached, so the plan cannot drain the battery
            need = state.e_dem[i] - e0
            if rem[a] > W:
                need *= W / rem[a]
            u = self.u0 + a
            if state.e_dem[i] > state.e_min[i]:
                r = cum.copy()
                r[u] = 1.0
                rows.append(r)
                lo.append(need)
                hi.append(np.inf)
                c[u] = cfg.rho * kappa_max
                if not soft:
                    ub[u] = 0.0
            else:
                ub[u] = 0.0

        n_ev = len(self.evs)
        for k in range(W):
            pvg = self.pvg0 + k
            ub[pvg] = fc.pv[k]
            c[pvg] = -fc.sell[k] * dt
            here = [a for a in range(n_ev) if self.steps[a] > k]
            r = row()
            r[pvg] = 1.0
            for a in here:
                r[self.base[(a, k)]] = 1.0
            lo.append(-np.inf)
            hi.append(fc.pv[k])
            if len(here) * station.p_ch_max > station.g_max:
                r = row()
                for a in here:
                    r[self.base[(a, k)] + 2] = 1.0
                lo.append(-np.inf)
                hi.append(station.g_max)
            if len(here) * station.p_disch_max + fc.pv[k] > station.g_max:
                r = row()
                r[pvg] = 1.0
                for a in here:
                    r[self.base[(a, k)] + 3] = 1.0
                lo.append(-np.inf)
                hi.append(station.g_max)
            if len(here) >= 2:
                r = row()
                for a in here:
                    r[self.base[(a, k)] + 1] = 1.0
                    r[self.base[(a, k)] + 4] = -1.0
                lo.append(0.0)
                hi.append(0.0)

        A = np.array(rows) if rows else np.zeros((0, nv))
        self.lp = LinearProgram(c, A, np.array(lo), np.array(hi), lb, ub)

    def step_flows(self, x, k: int, n: int) -> np.ndarray:
        """(n, 5) flow matrix for window step ``k``; pvg is returned separately."""
        out = np.zeros((n, len(FLOW_VARS)))
        for a, i in enumerate(self.evs):
            if self.steps[a] > k:
                b = self.base[(a, k)]
                out[i] = x[b:b + 5]
        return np.maximum(out, 0.0)


def flows_to_actions(f: np.ndarray, tol: float = 1e-9):
    """Map per-charger planned flows (pvev, v2vc, g2v, v2g, v2vd) to actions.

    Simultaneous charge and discharge on one charger is netted first: the
    smaller side is removed, taking grid exchange before V2V before PV.
    With the request PV rule ``allocate`` reproduces the netted flows.
    """
    f = np.array(f, dtype=float)
    for j in range(f.shape[0]):
        ch = f[j, :3].sum()
        dis = f[j, 3:].sum()
        if ch > tol and dis > tol:
            if ch >= dis:
                take = dis
                for col in (2, 1, 0):
                    d = min(take, f[j, col])
                    f[j, col] -= d
                    take -= d
                f[j, 3:] = 0.0
            else:
                take = ch
                for col in (3, 4):
                    d = min(take, f[j, col])
                    f[j, col] -= d
                    take -= d
                f[j, :3] = 0.0
    # V2V must balance after netting; trim the larger side proportionally
    vc, vd = f[:, 1].sum(), f[:, 4].sum()
    if vc > vd + tol and vc > 0:
        moved = f[:, 1] * (1.0 - vd / vc)
        f[:, 1] -= moved
        f[:, 2] += moved
    elif vd > vc + tol and vd > 0:
        moved = f[:, 4] * (1.0 - vc / vd)
        f[:, 4] -= moved
        f[:, 3] += moved
    ch = f[:, :3].sum(axis=1)
    dis = f[:, 3:].sum(axis=1)
    actions = np.zeros((f.shape[0], 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        charging = ch > tol
        actions[:, 0] = np.where(charging, ch, -dis)
        pv_frac = np.where(charging, f[:, 0] / ch, 0.0)
        rest = ch - f[:, 0]
        v2v_c = np.where(rest > tol, f[:, 1] / rest, 0.0)
        v2v_d = np.where(dis > tol, f[:, 4] / dis, 0.0)
    actions[:, 1] = np.clip(np.where(charging, v2v_c, v2v_d), 0.0, 1.0)
    actions[:, 2] = np.clip(pv_frac, 0.0, 1.0)
    return actions, f


def _flows_from_matrix(f: np.ndarray, pvg: float) -> PowerFlows:
    return PowerFlows(
        p_ch=f[:, :3].sum(axis=1), p_disch=f[:, 3:].sum(axis=1), p_pvev=f[:, 0].copy(),
        p_v2v_c=f[:, 1].copy(), p_v2v_d=f[:, 4].copy(), p_g2v=f[:, 2].copy(), p_v2g=f[:, 3].copy(),
        p_pvg=float(pvg),
    )


def rho_plan(state: StationState, forecast: Forecast, cfg: RhoConfig, station: StationConfig,
             kappa_max: Optional[float] = None) -> RhoPlan:
    """Solve the window program from ``state`` and return first-step actions.

    The objective is grid purchase minus grid sales (EV and PV) plus linear
    cycle aging, plus ``rho * kappa_max`` per kWh of demand still unmet at
    departure (or, for a fixed window shorter than the stay, of the
    proportional share due by the window end). ``kappa_max`` defaults to the
    largest forecast buy price. EVs arriving later are not anticipated.
    """
    n = state.n
    if kappa_max is None:
        kappa_max = float(np.max(forecast.buy)) if len(forecast) else 0.0
    if not state.occupied.any() or len(forecast) == 0:
        pv0 = float(forecast.pv[0]) if len(forecast) else 0.0
        flows = PowerFlows.zeros(n)
        flows.p_pvg = min(pv0, station.g_max)
        return RhoPlan(np.zeros((n, 3)), flows, None, 0)
    relaxed = False
    model = _WindowModel(state, forecast, cfg, station, kappa_max, soft=not cfg.hard_demand)
    res = solve(model.lp)
    if not res.ok:
        relaxed = True
        model = _WindowModel(state, forecast, cfg, station, kappa_max, soft=True)
        res = solve(model.lp)
        if not res.ok:
            raise RuntimeError(f"window program failed at t={state.t}: {res.status} {res.message}")
    schedule = [model.step_flows(res.x, k, n) for k in range(model.W)]
    actions, f0 = flows_to_actions(schedule[0])
    pvg = float(min(forecast.pv[0] - f0[:, 0].sum(), res.x[model.pvg0]))
    pvg = max(pvg, 0.0)
    return RhoPlan(actions, _flows_from_matrix(f0, pvg), res, model.W, relaxed,
                   schedule=[flows_to_actions(s)[0] for s in schedule])


class RhoPolicy:
    """Rolling-horizon controller; executes only the current step of each plan.

    Needs the true station state (it is a centralized controller), so it
    reads ``state`` rather than the observation matrix.
    """

    decentralized = False

    def __init__(self, cfg: RhoConfig = RhoConfig(), scenario: Optional[Scenario] = None):
        self.cfg = cfg
        self.scenario = None
        self.solves = 0
        self.relaxed = 0
        if scenario is not None:
            self.reset(scenario)

    def reset(self, scenario: Scenario):
        self.scenario = scenario
        self.kappa_max = float(scenario.buy.max(initial=0.0))
        self.solves = 0
        self.relaxed = 0
        self._plan = None
        self._plan_t = 0
        self._plan_sessions = frozenset()

    def _needs_solve(self, state: StationState) -> bool:
        if self.cfg.trigger == "every_step" or self._plan is None:
            return True
        k = state.t - self._plan_t
        sessions = frozenset(state.session_idx[state.occupied].tolist())
        return k >= len(self._plan.schedule or []) or not sessions <= self._plan_sessions

    def plan(self, state: StationState) -> RhoPlan:
        sc = self.scenario
        rem = int(state.remaining_steps[state.occupied].max(initial=0))
        length = self.cfg.k if self.cfg.window == "fixed" else max(rem, 1)
        fc = make_forecast(sc, state.t, length, self.cfg.forecast)
        return rho_plan(state, fc, self.cfg, sc.station, self.kappa_max)

    def __call__(self, obs, state: StationState) -> np.ndarray:
        if self.scenario is None:
            raise RuntimeError("RhoPolicy.reset(scenario) must be called before use")
        if not state.occupied.any():
            return np.zeros((state.n, 3))
        if self._needs_solve(state):
            self._plan = self.plan(state)
            self._plan_t = state.t
            self._plan_sessions = frozenset(state.session_idx[state.occupied].tolist())
            self.solves += 1
            self.relaxed += int(self._plan.relaxed)
            return self._plan.actions
        return self._plan.schedule[state.t - self._plan_t]


# -- centralized DQN ---------------------------------------------------------------------

@dataclass(frozen=True)
class MadqnConfig:
    power_levels: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    request_levels: tuple = (0.0, 1.0)
    gamma: float = 0.95
    lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    batch_size: int = 64
    buffer_capacity: int = 100_000
    episodes: int = 200
    warmup: int = 500
    steps_per_update: int = 4
    hidden: tuple = (64, 64)
    tau: float = 0.01
    pv_rule: str = "request"

    def __post_init__(self):
        p = np.asarray(self.power_levels, dtype=float)
        if p.size == 0 or np.any(np.abs(p) > 1.0) or not np.any(p == 0.0):
            raise ValueError("power levels are fractions in [-1, 1] and must include 0")
        r = np.asarray(self.request_levels, dtype=float)
        if r.size == 0 or np.any((r < 0) | (r > 1)):
            raise ValueError("request levels must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("exploration rates must lie in [0, 1]")


def action_table(cfg: MadqnConfig, station: StationConfig) -> np.ndarray:
    """Discrete action set as rows of (p_signed kW, v2v fraction, pv fraction).

    Index order: power level major, then PV request, then V2V request.
    """
    rows = []
    for p in cfg.power_levels:
        kw = p * (station.p_ch_max if p >= 0 else station.p_disch_max)
        for pv in cfg.request_levels:
            for v2v in cfg.request_levels:
                rows.append((kw, v2v, pv))
    return np.array(rows, dtype=float)


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(q, axis=-1)


class MadqnPolicy:
    """Per-agent Q-networks over the joint observation (centralized execution)."""

    decentralized = False

    def __init__(self, nets, obs_scale, station: StationConfig, cfg: MadqnConfig = MadqnConfig()):
        self.nets = [n.copy() for n in nets]
        self.obs_scale = np.asarray(obs_scale, dtype=float)
        self.station = station
        self.cfg = cfg
        self.table = action_table(cfg, station)

    @property
    def n_agents(self) -> int:
        return len(self.nets)

    def q_values(self, obs) -> np.ndarray:
        x = (np.asarray(obs, dtype=float) / self.obs_scale).ravel()
        return np.array([net.forward(x) for net in self.nets])

    def __call__(self, obs, state=None) -> np.ndarray:
        return self.table[greedy(self.q_values(obs))]

    def save(self, path) -> Path:
        meta = {"kind": "madqn", "obs_scale": self.obs_scale.tolist(), "station": asdict(self.station),
                "n_agents": self.n_agents, "config": asdict(self.cfg)}
        return save_networks(path, {f"q{j}": q for j, q in enumerate(self.nets)}, meta)

    @classmethod
    def load(cls, path) -> "MadqnPolicy":
        nets, meta = load_networks(path)
        if meta.get("kind") != "madqn":
            raise ValueError(f"{path}: not a MADQN checkpoint")
        c = meta["config"]
        c = {k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}
        return cls([nets[f"q{j}"] for j in range(meta["n_agents"])], meta["obs_scale"],
                   StationConfig(**meta["station"]), MadqnConfig(**c))


@dataclass
class MadqnResult:
    policy: MadqnPolicy
    curve: list


def _soft(online: MLP, target: MLP, tau: float):
    target.theta *= 1.0 - tau
    target.theta += tau * online.theta


def madqn_train(scenarios, cfg: MadqnConfig = MadqnConfig(), seed: int = 0,
                reward: RewardConfig = RewardConfig(), obs_scale=None, diagnostics_dir=None) -> MadqnResult:
    """Independent per-agent DQN targets on a shared global observation."""
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    scenarios = list(scenarios)
    station = scenarios[0].station
    n = station.n_chargers
    if any(s.station.n_chargers != n for s in scenarios):
        raise ValueError("all training scenarios need the same number of chargers")
    scale = obs_scale_for(scenarios) if obs_scale is None else np.asarray(obs_scale, dtype=float)
    table = action_table(cfg, station)
    n_act = len(table)
    ss = np.random.SeedSequence(seed)
    init_rng, buf_rng, eps_rng, pick_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    nets = [MLP([n * OBS_DIM, *cfg.hidden, n_act], "relu", "identity", rng=init_rng) for _ in range(n)]
    targets = [q.copy() for q in nets]
    opts = [Adam(q.params(), lr=cfg.lr) for q in nets]
    buf = ReplayBuffer(cfg.buffer_capacity, n, buf_rng, obs_dim=OBS_DIM, act_dim=1)
    envs = [StationEnv(s, reward, cfg.pv_rule) for s in scenarios]
    decay = max(1, int(cfg.eps_decay_frac * cfg.episodes))
    curve = []
    total = 0
    for ep in range(cfg.episodes):
        eps = cfg.eps_start + min(ep / decay, 1.0) * (cfg.eps_end - cfg.eps_start)
        env = envs[int(pick_rng.integers(len(envs)))]
        state = env.reset()
        obs = env.observe(state) / scale
        ep_reward, ep_cost, outcomes = 0.0, 0.0, []
        while True:
            x = obs.ravel()
            idx = np.array([greedy(q.forward(x)) for q in nets])
            explore = eps_rng.random(n) < eps
            idx = np.where(explore, eps_rng.integers(n_act, size=n), idx)
            res = env.step(state, table[idx])
            next_obs = env.observe(res.state) / scale
            buf.add(obs, idx[:, None].astype(float), res.rewards, next_obs, res.done)
            ep_reward += float(res.rewards.sum())
            ep_cost += res.cost.total
            outcomes.extend(res.departures)
            total += 1
            if total >= cfg.warmup and len(buf) >= cfg.batch_size and total % cfg.steps_per_update == 0:
                b = buf.sample(cfg.batch_size)
                xs = b.obs.reshape(cfg.batch_size, -1)
                xn = b.next_obs.reshape(cfg.batch_size, -1)
                rows = np.arange(cfg.batch_size)
                for j in range(n):
                    y = b.rew[:, j] + cfg.gamma * (1.0 - b.done) * targets[j].forward(xn).max(axis=1)
                    q = nets[j].forward(xs)
                    a = b.act[:, j, 0].astype(int)
                    g = np.zeros_like(q)
                    g[rows, a] = 2.0 * (q[rows, a] - y) / cfg.batch_size
                    nets[j].zero_grad()
                    nets[j].backward(g)
                    try:
                        opts[j].step(nets[j].grads(), f"agent {j}")
                    except TrainingDivergence as exc:
                        _dump_diagnostics(diagnostics_dir, ep, total, curve, exc)
                        raise TrainingDivergence(f"episode {ep}, step {total}: {exc}") from exc
                    _soft(nets[j], targets[j], cfg.tau)
            state, obs = res.state, next_obs
            if res.done:
                break
        curve.append({"episode": ep, "mean_reward": ep_reward / n,
                      "completion": completion_ratio(outcomes), "cost": ep_cost})
    return MadqnResult(MadqnPolicy(nets, scale, station, cfg), curve)


def madqn_policy(result: Union[MadqnResult, MadqnPolicy]) -> MadqnPolicy:
    return result.policy if isinstance(result, MadqnResult) else result
