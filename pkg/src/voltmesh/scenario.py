"""Scenario data: CSV ingestion, synthetic generation and run configuration.

File formats (headers are matched exactly)::

    sessions.csv  session_id,charger_id,arrival_step,departure_step,e_demand_kwh,e_init_kwh,e_cap_kwh
    prices.csv    step,buy,sell
    solar.csv     step,gen_kw

``e_demand_kwh`` is the target battery level at departure. Battery
parameters that the session file does not carry (e_min, efficiencies, cycle
life, battery price) come from the run configuration, a flat ``key=value``
text file whose keys are listed in ``DEFAULT_CONFIG``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dispatch import ExogenousStep
from .station import ChargerSession, InvalidSession, StationConfig

SESSIONS_HEADER = ["session_id", "charger_id", "arrival_step", "departure_step",
                   "e_demand_kwh", "e_init_kwh", "e_cap_kwh"]
PRICES_HEADER = ["step", "buy", "sell"]
SOLAR_HEADER = ["step", "gen_kw"]

DEFAULT_CONFIG = {
    # station
    "n_chargers": 2,
    "delta_t": 0.25,
    "p_ch_max": 16.0,
    "p_disch_max": 16.0,
    "g_max": 100.0,
    "pv_capacity": 30.0,
    # battery defaults applied to every session
    "e_min": 0.0,
    "eta_ch": 0.95,
    "eta_disch": 0.95,
    "l_cyc": 3000.0,
    "kappa_batt": 6000.0,
    # reward
    "rho": 1.0,
    "xi": 0.5,
    "grid_penalty_coeff": 1.0,
    "fairness_sign": "minus",
    "pv_rule": "request",
    # learning
    "gamma": 0.95,
    "tau": 0.01,
    "batch_size": 256,
    "lr_actor": 1e-3,
    "lr_critic": 1e-3,
    "warmup": 1000,
    "steps_per_update": 1,
    "buffer_capacity": 100000,
}


class ScenarioError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

def _coerce(key, raw: str):
    default = DEFAULT_CONFIG[key]
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ScenarioError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = dict(DEFAULT_CONFIG)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULT_CONFIG:
            raise ScenarioError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]!r}\n".replace("'", "") for k in DEFAULT_CONFIG if k in cfg)


def station_from_config(cfg: dict) -> StationConfig:
    return StationConfig(**{f.name: cfg[f.name] for f in fields(StationConfig)})


# -- scenario ------------------------------------------------------------------

@dataclass
class Scenario:
    station: StationConfig
    buy: np.ndarray
    sell: np.ndarray
    pv: np.ndarray
    sessions: list = field(default_factory=list)
    v2v: Optional[np.ndarray] = None

    def __post_init__(self):
        self.buy = np.asarray(self.buy, dtype=float)
        self.sell = np.asarray(self.sell, dtype=float)
        self.pv = np.asarray(self.pv, dtype=float)
        if self.v2v is None:
            self.v2v = 0.5 * (self.buy + self.sell)
        self.sessions = sorted(self.sessions, key=lambda s: (s.arrival_step, s.charger_id))

    @property
    def horizon(self) -> int:
        return len(self.buy)

    @property
    def steps_per_day(self) -> int:
        return int(round(24.0 / self.station.delta_t))

    @property
    def n_chargers(self) -> int:
        return self.station.n_chargers

    def exogenous(self, t: int) -> ExogenousStep:
        return ExogenousStep(float(self.buy[t]), float(self.sell[t]), float(self.v2v[t]), float(self.pv[t]))

    def validate(self) -> "Scenario":
        h = self.horizon
        if not (len(self.sell) == len(self.pv) == len(self.v2v) == h):
            raise ScenarioError("price and solar series must have the horizon's length")
        if np.any(self.buy < 0) or np.any(self.sell < 0):
            raise ScenarioError("negative price in series")
        if np.any(self.sell > self.buy):
            t = int(np.flatnonzero(self.sell > self.buy)[0])
            raise ScenarioError(f"sell price exceeds buy price at step {t}")
        if np.any(self.pv < 0):
            raise ScenarioError("negative PV generation")
        last = {}
        for s in self.sessions:
            if not 0 <= s.charger_id < self.n_chargers:
                raise ScenarioError(f"session {s.session_id}: charger {s.charger_id} out of range")
            if s.arrival_step < 0 or s.departure_step > h:
                raise ScenarioError(f"session {s.session_id}: outside horizon [0, {h}]")
            prev = last.get(s.charger_id)
            if prev is not None and s.arrival_step < prev.departure_step:
                raise ScenarioError(
                    f"overlapping sessions on charger {s.charger_id}: "
                    f"{prev.session_id} and {s.session_id}"
                )
            last[s.charger_id] = s
        return self

    def day(self, d: int) -> "Scenario":
        """One-day slice; sessions crossing the day boundary are dropped."""
        spd = self.steps_per_day
        lo, hi = d * spd, (d + 1) * spd
        sessions = [
            _shift(s, -lo) for s in self.sessions if s.arrival_step >= lo and s.departure_step <= hi
        ]
        return Scenario(self.station, self.buy[lo:hi], self.sell[lo:hi], self.pv[lo:hi],
                        sessions, self.v2v[lo:hi]).validate()

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.station == other.station
            and self.sessions == other.sessions
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("buy", "sell", "pv", "v2v"))
        )


def _shift(s: ChargerSession, offset: int) -> ChargerSession:
    from dataclasses import replace
    return replace(s, arrival_step=s.arrival_step + offset, departure_step=s.departure_step + offset)


# -- CSV -------------------------------------------------------------------------

def _read_rows(source, header, name):
    """Yield (line_number, row) after checking the header exactly."""
    try:
        text = Path(source).read_text() if not isinstance(source, io.StringIO) else source.getvalue()
    except UnicodeDecodeError as exc:
        raise ScenarioError(f"{name}: not valid text ({exc.reason} at byte {exc.start})") from None
    reader = csv.reader(io.StringIO(text))
    lineno = 1
    try:
        got = next(reader)
    except StopIteration:
        raise ScenarioError(f"{name}: empty file") from None
    except csv.Error as exc:
        raise ScenarioError(f"{name} line 1: {exc}") from None
    if [h.strip() for h in got] != header:
        raise ScenarioError(f"{name} line 1: header {got} != {header}")
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except csv.Error as exc:
            raise ScenarioError(f"{name} line {reader.line_num}: {exc}") from None
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ScenarioError(f"{name} line {lineno}: expected {len(header)} fields, got {len(row)}")
        yield lineno, row


def _num(value, kind, name, lineno, col):
    try:
        x = kind(value)
    except ValueError:
        raise ScenarioError(f"{name} line {lineno}: {col} is not a valid {kind.__name__}: {value!r}") from None
    if kind is float and not math.isfinite(x):
        raise ScenarioError(f"{name} line {lineno}: {col} is not finite")
    return x


def _read_series(source, header, name):
    steps, cols = [], [[] for _ in header[1:]]
    for lineno, row in _read_rows(source, header, name):
        step = _num(row[0], int, name, lineno, "step")
        if step != len(steps):
            raise ScenarioError(f"{name} line {lineno}: expected step {len(steps)}, got {step}")
        steps.append(step)
        for c, (col, v) in enumerate(zip(header[1:], row[1:])):
            x = _num(v, float, name, lineno, col)
            if x < 0:
                raise ScenarioError(f"{name} line {lineno}: negative {col}")
            cols[c].append(x)
    return [np.array(c) for c in cols]


def read_csv_table(path) -> list:
    """Read any CSV emitted by this package into a list of dicts with floats where possible."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                try:
                    rec[k] = float(v)
                except (TypeError, ValueError):
                    rec[k] = v
            out.append(rec)
    return out


def load_scenario(sessions_csv, prices_csv, solar_csv, config=None) -> Scenario:
    if config is None:
        cfg = dict(DEFAULT_CONFIG)
    elif isinstance(config, dict):
        cfg = {**DEFAULT_CONFIG, **config}
    else:
        cfg = load_config(config)
    station = station_from_config(cfg)
    buy, sell = _read_series(prices_csv, PRICES_HEADER, "prices.csv")
    (pv,) = _read_series(solar_csv, SOLAR_HEADER, "solar.csv")
    if len(buy) != len(pv):
        raise ScenarioError(f"length mismatch: prices.csv has {len(buy)} steps, solar.csv has {len(pv)}")

    sessions, rows_by_id = [], {}
    for lineno, row in _read_rows(sessions_csv, SESSIONS_HEADER, "sessions.csv"):
        sid, cid, arr, dep = (_num(v, int, "sessions.csv", lineno, c) for v, c in zip(row[:4], SESSIONS_HEADER))
        dem, init, cap = (_num(v, float, "sessions.csv", lineno, c) for v, c in zip(row[4:], SESSIONS_HEADER[4:]))
        if min(dem, init, cap) < 0:
            raise ScenarioError(f"sessions.csv line {lineno}: negative energy field")
        if sid in rows_by_id:
            raise ScenarioError(f"sessions.csv line {lineno}: duplicate session_id {sid}")
        rows_by_id[sid] = lineno
        try:
            sessions.append(ChargerSession(
                charger_id=cid, arrival_step=arr, departure_step=dep, e_demand=dem, e_init=init,
                e_cap=cap, e_min=cfg["e_min"], e_max=cap, eta_ch=cfg["eta_ch"],
                eta_disch=cfg["eta_disch"], l_cyc=cfg["l_cyc"], kappa_batt=cfg["kappa_batt"],
                session_id=sid,
            ))
        except InvalidSession as exc:
            raise ScenarioError(f"sessions.csv line {lineno}: {exc}") from None

    by_charger = {}
    for s in sorted(sessions, key=lambda s: (s.charger_id, s.arrival_step)):
        prev = by_charger.get(s.charger_id)
        if prev is not None and s.arrival_step < prev.departure_step:
            raise ScenarioError(
                f"sessions.csv rows {rows_by_id[prev.session_id]} and {rows_by_id[s.session_id]}: "
                f"overlapping sessions on charger {s.charger_id}"
            )
        by_charger[s.charger_id] = s
    return Scenario(station, buy, sell, pv, sessions).validate()


def load_scenario_dir(path, config=None) -> Scenario:
    p = Path(path)
    if config is None and (p / "config.txt").exists():
        config = p / "config.txt"
    return load_scenario(p / "sessions.csv", p / "prices.csv", p / "solar.csv", config)


def save_scenario(scenario: Scenario, path, extra_config: Optional[dict] = None) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    with open(p / "sessions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SESSIONS_HEADER)
        for s in sorted(scenario.sessions, key=lambda s: s.session_id):
            w.writerow([s.session_id, s.charger_id, s.arrival_step, s.departure_step,
                        repr(s.e_demand), repr(s.e_init), repr(s.e_cap)])
    with open(p / "prices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRICES_HEADER)
        for t, (b, s) in enumerate(zip(scenario.buy, scenario.sell)):
            w.writerow([t, repr(float(b)), repr(float(s))])
    with open(p / "solar.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SOLAR_HEADER)
        for t, g in enumerate(scenario.pv):
            w.writerow([t, repr(float(g))])
    cfg = dict(DEFAULT_CONFIG)
    cfg.update({f.name: getattr(scenario.station, f.name) for f in fields(StationConfig)})
    if scenario.sessions:
        s0 = scenario.sessions[0]
        cfg.update(e_min=s0.e_min, eta_ch=s0.eta_ch, eta_disch=s0.eta_disch,
                   l_cyc=s0.l_cyc, kappa_batt=s0.kappa_batt)
    cfg.update(extra_config or {})
    (p / "config.txt").write_text(format_config(cfg))
    return p


# -- synthetic generator ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticProfile:
    arrival_mean_h: float = 9.0
    arrival_std_h: float = 2.0
    second_visit_prob: float = 0.5
    stay_h: tuple = (2.0, 10.0)
    demand_kwh: tuple = (5.0, 35.0)
    init_frac: tuple = (0.1, 0.4)
    e_cap: float = 40.0
    # three-tier TOU buy price (currency/kWh) and its hour boundaries
    tou_offpeak: float = 0.15
    tou_shoulder: float = 0.25
    tou_peak: float = 0.45
    peak_hours: tuple = (16.0, 21.0)
    shoulder_hours: tuple = (7.0, 16.0)
    sell_mean: float = 0.08
    sell_amplitude: float = 0.04
    sell_noise: float = 0.01
    cloud: tuple = (0.6, 1.0)


PROFILES = {"default": SyntheticProfile()}


def tou_price(hour, prof: SyntheticProfile):
    hour = np.asarray(hour)
    price = np.full(hour.shape, prof.tou_offpeak)
    price = np.where((hour >= prof.shoulder_hours[0]) & (hour < prof.shoulder_hours[1]), prof.tou_shoulder, price)
    return np.where((hour >= prof.peak_hours[0]) & (hour < prof.peak_hours[1]), prof.tou_peak, price)


def generate_synthetic(n_chargers: int, days: int = 1, seed: int = 0, profile="default",
                       station: Optional[StationConfig] = None, config: Optional[dict] = None) -> Scenario:
    """Random but reproducible station scenario.

    Arrivals cluster mid-morning with an optional second visit later in the
    day; the buy price is a three-tier TOU tariff, the sell price a noisy
    diurnal wave kept below the buy price, and solar a clipped sine between
    06:00 and 18:00 scaled by a daily cloud factor.
    """
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    cfg = {**DEFAULT_CONFIG, **(config or {})}
    if station is None:
        cfg["n_chargers"] = n_chargers
        station = station_from_config(cfg)
    elif station.n_chargers != n_chargers:
        raise ValueError("station.n_chargers disagrees with n_chargers")
    rng = np.random.default_rng(seed)
    dt = station.delta_t
    spd = int(round(24.0 / dt))
    horizon = days * spd
    hour = (np.arange(horizon) % spd) * dt

    buy = tou_price(hour, prof)
    wave = prof.sell_mean + prof.sell_amplitude * np.sin(2 * np.pi * (hour - 11.0) / 24.0)
    sell = np.clip(wave + prof.sell_noise * rng.standard_normal(horizon), 0.0, None)
    sell = np.minimum(sell, buy)

    day_cloud = rng.uniform(*prof.cloud, size=days)
    shape = np.clip(np.sin(np.pi * (hour + 0.5 * dt - 6.0) / 12.0), 0.0, None)
    shape[(hour < 6.0) | (hour >= 18.0)] = 0.0
    pv = station.pv_capacity * shape * np.repeat(day_cloud, spd)

    sessions = []
    sid = 0
    e_cap = prof.e_cap
    e_min = cfg["e_min"]
    for d in range(days):
        for c in range(n_chargers):
            t0 = d * spd
            arrival_h = float(np.clip(rng.normal(prof.arrival_mean_h, prof.arrival_std_h), 5.0, 14.0))
            visits = [arrival_h]
            want_second = rng.random() < prof.second_visit_prob
            free_at = t0
            for k in range(2):
                if k == 1:
                    if not want_second:
                        break
                    start_h = (free_at - t0) * dt + rng.uniform(0.5, 3.0)
                    if start_h > 20.0:
                        break
                    visits.append(start_h)
                a = t0 + int(round(visits[k] / dt))
                stay = int(round(rng.uniform(*prof.stay_h) / dt))
                dep = min(a + max(stay, 1), t0 + spd, horizon)
                if a < free_at or a >= dep:
                    break
                e_init = max(e_min, e_cap * rng.uniform(*prof.init_frac))
                e_dem = min(e_cap, e_init + rng.uniform(*prof.demand_kwh))
                sessions.append(ChargerSession(
                    charger_id=c, arrival_step=a, departure_step=dep, e_demand=e_dem, e_init=e_init,
                    e_cap=e_cap, e_min=e_min, e_max=e_cap, eta_ch=cfg["eta_ch"], eta_disch=cfg["eta_disch"],
                    l_cyc=cfg["l_cyc"], kappa_batt=cfg["kappa_batt"], session_id=sid,
                ))
                sid += 1
                free_at = dep
    return Scenario(station, buy, sell, pv, sessions).validate()


def parse_synthetic_spec(spec: str):
    """``synthetic:NxH`` -> (n_chargers, horizon_steps)."""
    body = spec.split(":", 1)[1] if spec.startswith("synthetic:") else spec
    try:
        n, h = (int(x) for x in body.lower().split("x"))
    except ValueError:
        raise ScenarioError(f"bad synthetic scenario spec {spec!r}; expected synthetic:NxH") from None
    if n < 1 or h < 1:
        raise ScenarioError(f"bad synthetic scenario spec {spec!r}")
    return n, h


def synthetic_from_spec(spec: str, seed: int = 0, config: Optional[dict] = None) -> Scenario:
    n, h = parse_synthetic_spec(spec)
    cfg = {**DEFAULT_CONFIG, **(config or {})}
    spd = int(round(24.0 / cfg["delta_t"]))
    days = -(-h // spd)
    sc = generate_synthetic(n, days, seed, config=config)
    if days * spd == h:
        return sc
    sessions = [s for s in sc.sessions if s.departure_step <= h]
    return Scenario(sc.station, sc.buy[:h], sc.sell[:h], sc.pv[:h], sessions).validate()
