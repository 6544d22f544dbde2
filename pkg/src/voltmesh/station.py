"""Charger and EV battery model.

Pure functions over small value types. The array helpers (``battery_update``,
``charge_limits``, ``cycle_aging``) are elementwise so the episode engine can
run a whole station bank at once; the dataclass operations wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

BOUND_TOL = 1e-9


class ContractViolation(RuntimeError):
    """Raised when a battery leaves its energy window (an allocator bug)."""


class InvalidSession(ValueError):
    pass


@dataclass(frozen=True)
class StationConfig:
    n_chargers: int = 2
    delta_t: float = 0.25
    p_ch_max: float = 16.0
    p_disch_max: float = 16.0
    g_max: float = 100.0
    pv_capacity: float = 30.0

    def __post_init__(self):
        if self.n_chargers < 1:
            raise ValueError("n_chargers must be >= 1")
        if not 0.0 < self.delta_t <= 1.0:
            raise ValueError(f"delta_t must be in (0, 1], got {self.delta_t}")
        for name in ("p_ch_max", "p_disch_max", "g_max", "pv_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ChargerSession:
    charger_id: int
    arrival_step: int
    departure_step: int
    e_demand: float
    e_init: float
    e_cap: float = 40.0
    e_min: float = 0.0
    e_max: Optional[float] = None
    eta_ch: float = 0.95
    eta_disch: float = 0.95
    l_cyc: float = 3000.0
    kappa_batt: float = 6000.0
    session_id: int = -1

    def __post_init__(self):
        if self.e_max is None:
            object.__setattr__(self, "e_max", self.e_cap)
        if not self.arrival_step < self.departure_step:
            raise InvalidSession(f"session {self.session_id}: arrival must precede departure")
        if not 0.0 <= self.e_min <= self.e_init <= self.e_max <= self.e_cap:
            raise InvalidSession(
                f"session {self.session_id}: need 0 <= e_min <= e_init <= e_max <= e_cap"
            )
        if not self.e_min <= self.e_demand <= self.e_max:
            raise InvalidSession(f"session {self.session_id}: e_demand outside [e_min, e_max]")
        if not (0.0 < self.eta_ch <= 1.0 and 0.0 < self.eta_disch <= 1.0):
            raise InvalidSession(f"session {self.session_id}: efficiencies must lie in (0, 1]")

    @property
    def duration(self) -> int:
        return self.departure_step - self.arrival_step


@dataclass(frozen=True)
class ChargerState:
    energy: float = 0.0
    remaining_steps: int = 0
    occupied: bool = False
    session: Optional[ChargerSession] = field(default=None, compare=False)

    @classmethod
    def empty(cls) -> "ChargerState":
        return cls()

    @classmethod
    def plug_in(cls, session: ChargerSession, step: Optional[int] = None) -> "ChargerState":
        now = session.arrival_step if step is None else step
        return cls(session.e_init, session.departure_step - now, True, session)

    def remaining_hours(self, delta_t: float) -> float:
        return self.remaining_steps * delta_t


@dataclass(frozen=True)
class DegradationOutcome:
    efc: float = 0.0
    age_frac: float = 0.0
    cost: float = 0.0


# -- elementwise kernels ------------------------------------------------------

def battery_update(energy, p_ch, p_disch, eta_ch, eta_disch, delta_t):
    return energy + p_ch * eta_ch * delta_t - p_disch * delta_t / eta_disch


def charge_limits(energy, e_min, e_max, eta_ch, eta_disch, occupied, cfg: StationConfig):
    """Largest feasible charge and discharge power for one step.

    Works on scalars or arrays. Unoccupied chargers get (0, 0).
    """
    dt = cfg.delta_t
    ch = np.minimum(cfg.p_ch_max, (e_max - energy) / (eta_ch * dt))
    dis = np.minimum(cfg.p_disch_max, (energy - e_min) * eta_disch / dt)
    ch = np.where(occupied, np.maximum(ch, 0.0), 0.0)
    dis = np.where(occupied, np.maximum(dis, 0.0), 0.0)
    return ch, dis


def cycle_aging(p_ch, p_disch, eta_ch, eta_disch, e_cap, l_cyc, kappa_batt, delta_t):
    """Equivalent full cycles, aging fraction and aging cost, elementwise."""
    throughput = np.abs(p_ch * eta_ch * delta_t - p_disch * delta_t / eta_disch)
    efc = 0.5 * throughput / e_cap
    age = efc / l_cyc
    return efc, age, age * kappa_batt


# -- value-type operations ----------------------------------------------------

def clamp_feasible(state: ChargerState, p_ch: float, p_disch: float, cfg: StationConfig):
    """Project requested powers onto the rate and energy-window limits."""
    if not state.occupied or state.session is None:
        return 0.0, 0.0
    s = state.session
    ch_lim, dis_lim = charge_limits(
        state.energy, s.e_min, s.e_max, s.eta_ch, s.eta_disch, True, cfg
    )
    return (
        float(min(max(p_ch, 0.0), ch_lim)),
        float(min(max(p_disch, 0.0), dis_lim)),
    )


def step_battery(state: ChargerState, p_ch: float, p_disch: float, cfg: StationConfig) -> ChargerState:
    if p_ch < 0 or p_disch < 0:
        raise ValueError("powers must be non-negative")
    if p_ch > 0 and p_disch > 0:
        raise ValueError("simultaneous charge and discharge")
    if not state.occupied or state.session is None:
        if p_ch or p_disch:
            raise ContractViolation("power applied to an empty charger")
        return state
    s = state.session
    energy = float(battery_update(state.energy, p_ch, p_disch, s.eta_ch, s.eta_disch, cfg.delta_t))
    if energy < s.e_min - BOUND_TOL or energy > s.e_max + BOUND_TOL:
        raise ContractViolation(
            f"charger {s.charger_id}: energy {energy:.12g} outside [{s.e_min}, {s.e_max}]"
        )
    energy = min(max(energy, s.e_min), s.e_max)
    return replace(state, energy=energy, remaining_steps=max(state.remaining_steps - 1, 0))


def degradation(p_ch: float, p_disch: float, session: ChargerSession, delta_t: float) -> DegradationOutcome:
    if session.e_cap <= 0:
        raise InvalidSession("e_cap must be positive")
    if p_ch < 0 or p_disch < 0:
        raise ValueError("powers must be non-negative")
    efc, age, cost = cycle_aging(
        p_ch, p_disch, session.eta_ch, session.eta_disch,
        session.e_cap, session.l_cyc, session.kappa_batt, delta_t,
    )
    return DegradationOutcome(float(efc), float(age), float(cost))
