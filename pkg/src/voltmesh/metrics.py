"""Satisfaction, fairness, cost and completion accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dispatch import ExogenousStep, PowerFlows
from .station import ChargerSession, ChargerState, DegradationOutcome, StationConfig


class DepartureBoundary(ValueError):
    """Satisfaction is undefined once no time remains."""


@dataclass(frozen=True)
class SatisfactionRecord:
    fap: float
    u: float
    psi: float
    u_mean: float
    rho: float


@dataclass(frozen=True)
class StepCost:
    energy_cost: float = 0.0
    pv_sale: float = 0.0
    battery_cost: float = 0.0
    n_active: int = 0

    @property
    def total(self) -> float:
        """Net station cost for the step; V2V settlements cancel out."""
        return self.energy_cost - self.pv_sale + self.battery_cost


def fap_and_u(e_dem, energy, t_rem_hours, rho, p_ch_max, floor=True):
    """Elementwise future average power and satisfaction score."""
    fap = (e_dem - energy) / t_rem_hours
    if floor:
        fap = np.maximum(fap, 0.0)
    return fap, -rho * fap / p_ch_max


def satisfaction(state: ChargerState, session: ChargerSession, rho: float, cfg: StationConfig,
                 floor: bool = True):
    """(fap, u) for one occupied charger.

    ``floor=False`` keeps the raw formula, which turns positive once the
    battery is above its target.
    """
    if not state.occupied:
        raise ValueError("satisfaction of an empty charger")
    t_rem = state.remaining_hours(cfg.delta_t)
    if t_rem <= 0:
        raise DepartureBoundary("no remaining time; use completion_ratio at departure")
    fap, u = fap_and_u(session.e_demand, state.energy, t_rem, rho, cfg.p_ch_max, floor)
    return float(fap), float(u)


def fairness(u_values) -> np.ndarray:
    u = np.asarray(u_values, dtype=float)
    if u.size == 0:
        return u
    return np.abs(u - u.mean())


def satisfaction_records(states: Sequence[ChargerState], rho: float, cfg: StationConfig):
    """Satisfaction and fairness for every active charger, in charger order."""
    active = [s for s in states if s.occupied]
    pairs = [satisfaction(s, s.session, rho, cfg) for s in active]
    psi = fairness([u for _, u in pairs])
    u_mean = float(np.mean([u for _, u in pairs])) if pairs else 0.0
    return [SatisfactionRecord(f, u, float(p), u_mean, rho) for (f, u), p in zip(pairs, psi)]


def step_cost(flows: PowerFlows, ex: ExogenousStep, degradations, delta_t: float, n_active: int = 0) -> StepCost:
    if isinstance(degradations, np.ndarray):
        batt = float(degradations.sum())
    else:
        batt = float(sum(d.cost if isinstance(d, DegradationOutcome) else d for d in degradations))
    energy = float((flows.p_g2v.sum() * ex.kappa_buy - flows.p_v2g.sum() * ex.kappa_sell) * delta_t)
    pv_sale = float(flows.p_pvg * ex.kappa_sell * delta_t)
    return StepCost(energy, pv_sale, batt, int(n_active))


def session_completion(delivered: float, requested: float) -> float:
    """Fraction of requested energy delivered, capped at 1."""
    if requested <= 0:
        return 1.0
    return float(min(1.0, max(delivered, 0.0) / requested))


def completion_ratio(outcomes: Iterable) -> float:
    """Mean completion percentage over finished sessions.

    ``outcomes`` holds ``(session, final_energy)`` pairs. The requested energy
    of a session is its target level minus its arrival energy.
    """
    ratios = [session_completion(e_final - s.e_init, s.e_demand - s.e_init) for s, e_final in outcomes]
    if not ratios:
        return 100.0
    return 100.0 * float(np.mean(ratios))


def completion_dispersion(outcomes: Iterable) -> float:
    """Standard deviation (in percent) of per-session completion ratios."""
    ratios = [session_completion(e - s.e_init, s.e_demand - s.e_init) for s, e in outcomes]
    if len(ratios) < 2:
        return 0.0
    return 100.0 * float(np.std(ratios))


def completion_distance(outcomes: Iterable) -> np.ndarray:
    """Per-session |completion - mean completion|, in percent."""
    r = np.array([session_completion(e - s.e_init, s.e_demand - s.e_init) for s, e in outcomes])
    if r.size == 0:
        return r
    return 100.0 * np.abs(r - r.mean())
