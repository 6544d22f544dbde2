"""MADDPG with centralized critics and decentralized actors.

Each agent owns a deterministic actor that reads only its own observation and
a critic that reads the joint observation and joint action. Exploration is
either parameter noise inside the actor (noisy layers) or Gaussian noise added
to the actor output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import ACT_DIM, OBS_DIM, RewardConfig, StationEnv, TransitionRecord, observation_bounds
from .metrics import completion_ratio
from .nn import MLP, Adam, TrainingDivergence, load_networks, save_networks
from .scenario import Scenario
from .station import StationConfig

log = logging.getLogger(__name__)

EXPLORATION_MODES = ("noisy_net", "action_noise")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.01
    batch_size: int = 256
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    episodes: int = 500
    steps_per_update: int = 1
    warmup: int = 1000
    buffer_capacity: int = 100_000
    exploration: str = "noisy_net"
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (128, 128)
    sigma0: float = 0.017
    action_noise_start: float = 0.3
    action_noise_end: float = 0.01
    pv_rule: str = "request"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.exploration not in EXPLORATION_MODES:
            raise ValueError(f"exploration must be one of {EXPLORATION_MODES}")
        if self.batch_size < 1 or self.steps_per_update < 1:
            raise ValueError("batch_size and steps_per_update must be >= 1")


# -- action / observation coding -------------------------------------------------

def to_physical(a, cfg: StationConfig) -> np.ndarray:
    """Map actor outputs in [-1, 1]^3 to (p_signed kW, v2v fraction, pv fraction)."""
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    out = np.empty_like(a)
    p = a[..., 0]
    out[..., 0] = np.where(p >= 0, p * cfg.p_ch_max, p * cfg.p_disch_max)
    out[..., 1] = 0.5 * (a[..., 1] + 1.0)
    out[..., 2] = 0.5 * (a[..., 2] + 1.0)
    return out


def from_physical(x, cfg: StationConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    p = x[..., 0]
    out[..., 0] = np.where(p >= 0, p / cfg.p_ch_max, p / cfg.p_disch_max)
    out[..., 1] = 2.0 * x[..., 1] - 1.0
    out[..., 2] = 2.0 * x[..., 2] - 1.0
    return out


def obs_scale_for(scenarios: Sequence[Scenario]) -> np.ndarray:
    highs = np.array([observation_bounds(s)[1] for s in scenarios])
    return np.maximum(highs.max(axis=0), 1e-6)


def critic_input(obs, actions) -> np.ndarray:
    """Joint critic input: all observations then all actions, agent-major."""
    b = obs.shape[0]
    return np.concatenate([obs.reshape(b, -1), actions.reshape(b, -1)], axis=1)


# -- replay ------------------------------------------------------------------------

class ReplayBuffer:
    """Bounded FIFO of joint transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int, n_agents: int, rng: np.random.Generator,
                 obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        self.capacity = capacity
        self.rng = rng
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.act = np.zeros((capacity, n_agents, act_dim))
        self.rew = np.zeros((capacity, n_agents))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def __len__(self):
        return self.size

    def add(self, obs, act, rew, next_obs, done: bool):
        i = self._pos
        self.obs[i], self.act[i], self.rew[i], self.next_obs[i] = obs, act, rew, next_obs
        self.done[i] = float(done)
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_record(self, rec: TransitionRecord):
        self.add(rec.obs, rec.actions, rec.rewards, rec.next_obs, rec.done)

    def sample_indices(self, batch: int) -> np.ndarray:
        if batch > self.size:
            raise ValueError(f"batch {batch} larger than buffer ({self.size})")
        return self.rng.choice(self.size, size=batch, replace=False)

    def sample(self, batch: int) -> "Batch":
        idx = self.sample_indices(batch)
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


# -- learner -------------------------------------------------------------------------

class AgentLearner:
    def __init__(self, n_agents: int, cfg: TrainConfig, rng: np.random.Generator):
        noisy = cfg.exploration == "noisy_net"
        self.actor = MLP([OBS_DIM, *cfg.actor_hidden, ACT_DIM], "relu", "tanh", noisy=noisy, rng=rng,
                         sigma0=cfg.sigma0)
        self.critic = MLP([n_agents * (OBS_DIM + ACT_DIM), *cfg.critic_hidden, 1], "relu", "identity", rng=rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.params(), lr=cfg.lr_actor)
        self.critic_opt = Adam(self.critic.params(), lr=cfg.lr_critic)


def soft_update(online: MLP, target: MLP, tau: float):
    for p, q in zip(online.params(), target.params()):
        q *= 1.0 - tau
        q += tau * p


def target_actions(next_obs, target_actors) -> np.ndarray:
    return np.stack([mu.forward(next_obs[:, k]) for k, mu in enumerate(target_actors)], axis=1)


def td_target(rewards, next_obs, target_actors, target_critic: MLP, gamma: float, done=None,
              next_actions=None) -> np.ndarray:
    """y = r + gamma * Q'(s', mu'_1(s'_1), ..., mu'_n(s'_n)), bootstrap masked on terminal."""
    rewards = np.asarray(rewards, dtype=float)
    if gamma == 0.0:
        return rewards.copy()
    if next_actions is None:
        next_actions = target_actions(next_obs, target_actors)
    q = target_critic.forward(critic_input(next_obs, next_actions))[:, 0]
    mask = 1.0 if done is None else 1.0 - np.asarray(done, dtype=float)
    return rewards + gamma * mask * q


def critic_loss_and_grad(critic: MLP, x, y):
    q = critic.forward(x)[:, 0]
    err = q - y
    loss = float(np.mean(err * err))
    critic.backward((2.0 * err / len(y))[:, None])
    return loss


def critic_update(learner: AgentLearner, batch: Batch, y) -> float:
    """One optimizer step on the mean squared TD error; returns the pre-step loss."""
    loss = critic_loss_and_grad(learner.critic, critic_input(batch.obs, batch.act), y)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"critic loss is {loss}")
    learner.critic_opt.step(learner.critic.grads(), "(critic)")
    return loss


def actor_objective_and_grad(actor: MLP, critic: MLP, j: int, obs, act) -> float:
    """Mean Q with agent j's action replaced by its actor output; grads land on the actor.

    The actor's parameter gradients are for the loss ``-objective``.
    """
    b, n = obs.shape[:2]
    a_j = actor.forward(obs[:, j])
    joint = act.copy()
    joint[:, j] = a_j
    q = critic.forward(critic_input(obs, joint))[:, 0]
    dx = critic.backward(np.full((b, 1), 1.0 / b))
    lo = n * OBS_DIM + j * ACT_DIM
    actor.backward(-dx[:, lo:lo + ACT_DIM])
    return float(q.mean())


def actor_update(learner: AgentLearner, j: int, batch: Batch) -> float:
    obj = actor_objective_and_grad(learner.actor, learner.critic, j, batch.obs, batch.act)
    if not np.isfinite(obj):
        raise TrainingDivergence(f"actor objective is {obj}")
    learner.actor_opt.step(learner.actor.grads(), f"(actor {j})")
    return obj


# -- execution-time policy -----------------------------------------------------------

class MaddpgPolicy:
    """Trained actors for decentralized execution.

    Agent j's action is a function of ``obs[j]`` alone; the critics are not
    kept. Noise is cleared, so execution is deterministic.
    """

    decentralized = True

    def __init__(self, actors: Sequence[MLP], obs_scale, station: StationConfig):
        self.actors = [a.copy() for a in actors]
        for a in self.actors:
            a.clear_noise()
        self.obs_scale = np.asarray(obs_scale, dtype=float)
        self.station = station

    @property
    def n_agents(self) -> int:
        return len(self.actors)

    def agent_action(self, j: int, obs_j) -> np.ndarray:
        a = self.actors[j].forward(np.asarray(obs_j, dtype=float) / self.obs_scale)
        return to_physical(a, self.station)

    def __call__(self, obs, state=None) -> np.ndarray:
        return np.array([self.agent_action(j, obs[j]) for j in range(self.n_agents)])

    def save(self, path) -> Path:
        meta = {"kind": "maddpg", "obs_scale": self.obs_scale.tolist(),
                "station": asdict(self.station), "n_agents": self.n_agents}
        return save_networks(path, {f"actor{j}": a for j, a in enumerate(self.actors)}, meta)

    @classmethod
    def load(cls, path) -> "MaddpgPolicy":
        nets, meta = load_networks(path)
        if meta.get("kind") != "maddpg":
            raise ValueError(f"{path}: not a MADDPG checkpoint")
        actors = [nets[f"actor{j}"] for j in range(meta["n_agents"])]
        return cls(actors, meta["obs_scale"], StationConfig(**meta["station"]))


# -- trainer ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: MaddpgPolicy
    curve: list
    learners: list

    def rewards(self) -> np.ndarray:
        return np.array([c["mean_reward"] for c in self.curve])


class MADDPG:
    def __init__(self, n_agents: int, station: StationConfig, cfg: TrainConfig, obs_scale, seed: int = 0):
        self.n = n_agents
        self.station = station
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        init_rng, self.noise_rng, buf_rng, self.explore_rng = (np.random.default_rng(s) for s in ss.spawn(4))
        self.learners = [AgentLearner(n_agents, cfg, init_rng) for _ in range(n_agents)]
        self.buffer = ReplayBuffer(cfg.buffer_capacity, n_agents, buf_rng)
        self.obs_scale = np.asarray(obs_scale, dtype=float)
        self.noisy = cfg.exploration == "noisy_net"
        self.updates = 0

    def act(self, obs_scaled, sigma: float = 0.0) -> np.ndarray:
        """Exploratory normalized joint action from local observations."""
        out = np.empty((self.n, ACT_DIM))
        for j, lr in enumerate(self.learners):
            if self.noisy:
                lr.actor.sample_noise(self.noise_rng)
            out[j] = lr.actor.forward(obs_scaled[j])
        if not self.noisy and sigma > 0:
            out = np.clip(out + sigma * self.explore_rng.standard_normal(out.shape), -1.0, 1.0)
        return out

    def update(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.batch_size)
        targets = [lr.target_actor for lr in self.learners]
        next_act = target_actions(batch.next_obs, targets)
        c_losses, objs = [], []
        for j, lr in enumerate(self.learners):
            y = td_target(batch.rew[:, j], batch.next_obs, targets, lr.target_critic, cfg.gamma,
                          batch.done, next_actions=next_act)
            c_losses.append(critic_update(lr, batch, y))
        for j, lr in enumerate(self.learners):
            if self.noisy:
                lr.actor.sample_noise(self.noise_rng)
            objs.append(actor_update(lr, j, batch))
        for lr in self.learners:
            soft_update(lr.actor, lr.target_actor, cfg.tau)
            soft_update(lr.critic, lr.target_critic, cfg.tau)
        self.updates += 1
        return {"critic_loss": float(np.mean(c_losses)), "actor_objective": float(np.mean(objs))}

    def policy(self) -> MaddpgPolicy:
        return MaddpgPolicy([lr.actor for lr in self.learners], self.obs_scale, self.station)


def action_noise_sigma(cfg: TrainConfig, episode: int) -> float:
    if cfg.episodes <= 1:
        return cfg.action_noise_end
    frac = min(episode / (cfg.episodes - 1), 1.0)
    return cfg.action_noise_start + frac * (cfg.action_noise_end - cfg.action_noise_start)


def train(scenarios, cfg: TrainConfig = TrainConfig(), seed: int = 0,
          reward: RewardConfig = RewardConfig(), obs_scale=None, diagnostics_dir=None) -> TrainResult:
    """Train MADDPG over a scenario set; deterministic given ``seed``.

    Each episode draws one scenario from the set. The learning curve holds
    the per-agent mean episode return, completion ratio and station cost.
    """
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    scenarios = list(scenarios)
    station = scenarios[0].station
    if any(s.station.n_chargers != station.n_chargers for s in scenarios):
        raise ValueError("all training scenarios need the same number of chargers")
    scale = obs_scale_for(scenarios) if obs_scale is None else np.asarray(obs_scale, dtype=float)
    algo = MADDPG(station.n_chargers, station, cfg, scale, seed)
    pick_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    envs = [StationEnv(s, reward, cfg.pv_rule) for s in scenarios]
    curve = []
    total_steps = 0
    for ep in range(cfg.episodes):
        env = envs[int(pick_rng.integers(len(envs)))]
        sigma = action_noise_sigma(cfg, ep)
        state = env.reset()
        obs = env.observe(state) / scale
        ep_reward = 0.0
        ep_cost = 0.0
        outcomes = []
        while True:
            a = algo.act(obs, sigma)
            res = env.step(state, to_physical(a, station))
            next_obs = env.observe(res.state) / scale
            algo.buffer.add(obs, a, res.rewards, next_obs, res.done)
            ep_reward += float(res.rewards.sum())
            ep_cost += res.cost.total
            outcomes.extend(res.departures)
            total_steps += 1
            if total_steps >= cfg.warmup and len(algo.buffer) >= cfg.batch_size \
                    and total_steps % cfg.steps_per_update == 0:
                try:
                    algo.update()
                except TrainingDivergence as exc:
                    _dump_diagnostics(diagnostics_dir, ep, total_steps, curve, exc)
                    raise TrainingDivergence(f"episode {ep}, step {total_steps}: {exc}") from exc
            state, obs = res.state, next_obs
            if res.done:
                break
        curve.append({
            "episode": ep,
            "mean_reward": ep_reward / station.n_chargers,
            "completion": completion_ratio(outcomes),
            "cost": ep_cost,
        })
        if ep % 50 == 0:
            log.info("episode %d reward %.3f cost %.3f", ep, curve[-1]["mean_reward"], ep_cost)
    return TrainResult(algo.policy(), curve, algo.learners)


def _dump_diagnostics(path, episode, step, curve, exc):
    if path is None:
        return
    import json
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    (p / "divergence.json").write_text(json.dumps(
        {"episode": episode, "step": step, "error": str(exc), "curve": curve}, indent=1))


def episodes_to_fraction(curve, frac: float = 0.95, final_window: int = 50, smooth: int = 20) -> int:
    """First episode whose smoothed return covers ``frac`` of the start-to-final improvement.

    Works for negative returns: the threshold is ``start + frac * (final - start)``,
    where ``start`` is the first smoothed value and ``final`` the mean of the
    last ``final_window`` episodes.
    """
    r = np.asarray([c["mean_reward"] if isinstance(c, dict) else c for c in curve], dtype=float)
    if r.size == 0:
        return 0
    k = min(smooth, r.size)
    sm = np.convolve(r, np.ones(k) / k, mode="valid")
    start = sm[0]
    final = r[-final_window:].mean()
    if final <= start:
        return 0
    thr = start + frac * (final - start)
    hit = np.flatnonzero(sm >= thr)
    return int(hit[0] + k - 1) if hit.size else int(r.size)
