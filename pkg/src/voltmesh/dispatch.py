"""Station-wide power-flow resolution.

Agents submit a signed power plus two request fractions (PV, V2V). ``allocate``
turns those into per-charger flows that respect the station balance and grid
limits; ``verify_flows`` is an independent checker used by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .station import ChargerState, StationConfig, charge_limits

FLOW_TOL = 1e-9
PV_RULES = ("request", "headroom")


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class AgentAction:
    p_signed: float = 0.0
    v2v_request: float = 0.0
    pv_request: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.p_signed, self.v2v_request, self.pv_request])


@dataclass(frozen=True)
class ExogenousStep:
    kappa_buy: float
    kappa_sell: float
    kappa_v2v: float
    pv_gen: float

    @classmethod
    def midpoint(cls, kappa_buy: float, kappa_sell: float, pv_gen: float) -> "ExogenousStep":
        return cls(kappa_buy, kappa_sell, 0.5 * (kappa_buy + kappa_sell), pv_gen)


@dataclass
class PowerFlows:
    p_ch: np.ndarray
    p_disch: np.ndarray
    p_pvev: np.ndarray
    p_v2v_c: np.ndarray
    p_v2v_d: np.ndarray
    p_g2v: np.ndarray
    p_v2g: np.ndarray
    p_pvg: float = 0.0
    grid_violation: float = 0.0

    @classmethod
    def zeros(cls, n: int) -> "PowerFlows":
        z = np.zeros(n)
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), z.copy())

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in self.per_charger_fields()}
        out["p_pvg"] = float(self.p_pvg)
        out["grid_violation"] = float(self.grid_violation)
        return out

    @staticmethod
    def per_charger_fields():
        return ("p_ch", "p_disch", "p_pvev", "p_v2v_c", "p_v2v_d", "p_g2v", "p_v2g")


class Violation(NamedTuple):
    constraint: str
    detail: str


def _action_matrix(actions) -> np.ndarray:
    if isinstance(actions, np.ndarray):
        a = np.asarray(actions, dtype=float)
    else:
        a = np.array([x.as_array() if isinstance(x, AgentAction) else x for x in actions], dtype=float)
    a = a.reshape(-1, 3)
    if not np.all(np.isfinite(a)):
        raise InputError("non-finite action component")
    return a


def bank_arrays(states):
    """(energy, occupied, e_min, e_max, eta_ch, eta_disch) for a charger bank.

    Accepts a sequence of ChargerState or any object exposing those arrays.
    """
    if hasattr(states, "energy") and hasattr(states, "e_max"):
        return (states.energy, states.occupied, states.e_min, states.e_max,
                states.eta_ch, states.eta_disch)
    states: Sequence[ChargerState]
    n = len(states)
    energy, occ = np.zeros(n), np.zeros(n, dtype=bool)
    e_min, e_max = np.zeros(n), np.zeros(n)
    eta_c, eta_d = np.ones(n), np.ones(n)
    for i, st in enumerate(states):
        if st.occupied and st.session is not None:
            s = st.session
            energy[i], occ[i] = st.energy, True
            e_min[i], e_max[i], eta_c[i], eta_d[i] = s.e_min, s.e_max, s.eta_ch, s.eta_disch
    return energy, occ, e_min, e_max, eta_c, eta_d


def _share(total: float, weights: np.ndarray) -> np.ndarray:
    s = weights.sum()
    if s <= 0.0:
        return np.zeros_like(weights)
    return weights * (total / s)


def allocate(actions, states, ex: ExogenousStep, cfg: StationConfig, pv_rule: str = "request") -> PowerFlows:
    """Resolve agent requests into feasible station flows.

    Order: PV to EVs, then V2V matching, then grid for the residuals, then
    proportional scaling of any grid side that exceeds ``g_max``.

    ``pv_rule="request"`` shares PV in proportion to requested PV power;
    ``"headroom"`` weights by request fraction times remaining battery room.
    """
    if pv_rule not in PV_RULES:
        raise ValueError(f"pv_rule must be one of {PV_RULES}")
    a = _action_matrix(actions)
    energy, occ, e_min, e_max, eta_c, eta_d = bank_arrays(states)
    if a.shape[0] != len(energy):
        raise InputError(f"{a.shape[0]} actions for {len(energy)} chargers")
    if not (np.isfinite(ex.pv_gen) and np.isfinite(ex.kappa_buy) and np.isfinite(ex.kappa_sell)):
        raise InputError("non-finite exogenous input")

    ch_lim, dis_lim = charge_limits(energy, e_min, e_max, eta_c, eta_d, occ, cfg)
    p = a[:, 0]
    v2v_req = np.clip(a[:, 1], 0.0, 1.0)
    pv_req = np.clip(a[:, 2], 0.0, 1.0)
    ch = np.minimum(np.maximum(p, 0.0), ch_lim)
    dis = np.minimum(np.maximum(-p, 0.0), dis_lim)

    pv_gen = max(float(ex.pv_gen), 0.0)
    req = pv_req * ch
    if pv_rule == "request":
        total = req.sum()
        pvev = req if total <= pv_gen else req * (pv_gen / total)
    else:
        weights = pv_req * np.maximum(e_max - energy, 0.0) * (ch > 0)
        pvev = np.minimum(req, _share(min(pv_gen, req.sum()), weights))

    residual = ch - pvev
    consume = v2v_req * residual
    offer = v2v_req * dis
    c_tot, o_tot = consume.sum(), offer.sum()
    matched = min(c_tot, o_tot)
    v2v_c = consume * (matched / c_tot) if c_tot > 0 else np.zeros_like(consume)
    v2v_d = offer * (matched / o_tot) if o_tot > 0 else np.zeros_like(offer)

    g2v = np.maximum(residual - v2v_c, 0.0)
    v2g = np.maximum(dis - v2v_d, 0.0)
    pvg = max(pv_gen - pvev.sum(), 0.0)

    violation = 0.0
    imp = g2v.sum()
    if imp > cfg.g_max:
        violation += imp - cfg.g_max
        g2v = g2v * (cfg.g_max / imp)
    exp = v2g.sum() + pvg
    if exp > cfg.g_max:
        violation += exp - cfg.g_max
        scale = cfg.g_max / exp
        v2g = v2g * scale
        pvg *= scale

    return PowerFlows(
        p_ch=pvev + v2v_c + g2v,
        p_disch=v2g + v2v_d,
        p_pvev=pvev,
        p_v2v_c=v2v_c,
        p_v2v_d=v2v_d,
        p_g2v=g2v,
        p_v2g=v2g,
        p_pvg=pvg,
        grid_violation=violation,
    )


def verify_flows(flows: PowerFlows, ex: ExogenousStep, cfg: StationConfig, tol: float = FLOW_TOL):
    """List every violated balance/limit constraint; empty means consistent."""
    out = []
    f = flows
    for name in PowerFlows.per_charger_fields():
        arr = getattr(f, name)
        if np.any(arr < -tol):
            out.append(Violation("non-negativity", f"{name} min {arr.min():.3g}"))
    if f.p_pvg < -tol:
        out.append(Violation("non-negativity", f"p_pvg {f.p_pvg:.3g}"))
    if np.any(f.p_ch > cfg.p_ch_max + tol):
        out.append(Violation("charge limit", f"p_ch max {f.p_ch.max():.6g}"))
    if np.any(f.p_disch > cfg.p_disch_max + tol):
        out.append(Violation("discharge limit", f"p_disch max {f.p_disch.max():.6g}"))
    both = (f.p_ch > tol) & (f.p_disch > tol)
    if np.any(both):
        out.append(Violation("charge/discharge exclusivity", f"chargers {np.flatnonzero(both).tolist()}"))
    r = f.p_ch - (f.p_pvev + f.p_v2v_c + f.p_g2v)
    if np.any(np.abs(r) > tol):
        out.append(Violation("charge balance", f"max residual {np.abs(r).max():.3g}"))
    r = f.p_disch - (f.p_v2g + f.p_v2v_d)
    if np.any(np.abs(r) > tol):
        out.append(Violation("discharge balance", f"max residual {np.abs(r).max():.3g}"))
    pv_used = f.p_pvev.sum() + f.p_pvg
    if pv_used > ex.pv_gen + tol:
        out.append(Violation("PV generation", f"{pv_used:.6g} > {ex.pv_gen:.6g}"))
    if f.p_g2v.sum() > cfg.g_max + tol:
        out.append(Violation("grid import cap", f"{f.p_g2v.sum():.6g} > {cfg.g_max}"))
    if f.p_v2g.sum() + f.p_pvg > cfg.g_max + tol:
        out.append(Violation("grid export cap", f"{f.p_v2g.sum() + f.p_pvg:.6g} > {cfg.g_max}"))
    d = f.p_v2v_c.sum() - f.p_v2v_d.sum()
    if abs(d) > tol:
        out.append(Violation("V2V balance", f"consumed - produced = {d:.3g}"))
    return out
