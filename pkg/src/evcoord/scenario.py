"""Synthetic scenarios, CSV ingestion, the ASAP+ baseline and reporting metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .model import (AWAY, DEFAULT_UNIT_SCALE, EvProfile, FeederSeries, LocationMap,
                    Scenario, ScenarioError, drop_infeasible, feeder_violation)

logger = logging.getLogger(__name__)

EVS_CSV = "evs.csv"
TRAJECTORY_CSV = "trajectory.csv"
FEEDERS_CSV = "feeders.csv"
AWAY_TOKEN = "AWAY"

EVS_HEADER = ["ev_id", "battery_kwh", "e_init_kwh"]
TRAJECTORY_HEADER = ["ev_id", "slot", "feeder_id", "demand_kwh", "p_min_kw",
                     "p_max_kw", "e_min_kwh", "e_max_kwh"]
FEEDERS_HEADER = ["feeder_id", "slot", "capacity_mw"]


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class GenConfig:
    """Parameters of the synthetic fleet.

    Trips happen between ``day_start`` and ``day_end`` (hours); each day draws
    a uniform integer number of trips from ``trips_per_day``.  A trip is long
    with probability ``long_trip_prob``.  Trip energy is uniform on the
    matching range and spread evenly over the trip's slots.  With probability
    ``shift_prob`` an EV keeps a shifted routine whose trip window starts
    ``shift_hours`` later, and every routine is offset by a uniform integer
    in ``[-jitter_hours, jitter_hours]``.  Feeder capacity
    is ``capacity_kw_per_ev`` times the number of EVs associated with the
    feeder (home plus half of work), scaled by a lognormal heterogeneity
    factor and by ``day_level`` during daytime hours.
    """

    n_evs: int = 1000
    n_feeders: int = 20
    horizon: int = 168
    charger_kw: float = 10.0
    battery_kwh: tuple = (40.0, 100.0)
    init_soc: tuple = (0.4, 0.9)
    reserve_soc: float = 0.1
    trips_per_day: tuple = (1, 3)
    trip_kwh: tuple = (2.0, 12.0)
    long_trip_prob: float = 0.05
    long_trip_kwh: tuple = (15.0, 30.0)
    shift_prob: float = 0.2
    shift_hours: int = 12
    jitter_hours: int = 2
    day_start: int = 6
    day_end: int = 22
    home_concentration: float = 2.0
    work_concentration: float = 0.5
    capacity_kw_per_ev: float = 2.0
    day_level: float = 0.6
    heterogeneity: float = 0.3
    max_retries: int = 20
    seed: int = 0

    def validate(self) -> None:
        def fail(name, why):
            raise ScenarioError(f"invalid generator parameter {name}: {why}")

        for name in ("n_evs", "n_feeders", "horizon"):
            if int(getattr(self, name)) < 1:
                fail(name, "must be >= 1")
        for name in ("charger_kw", "capacity_kw_per_ev", "home_concentration", "work_concentration"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                fail(name, "must be finite and > 0")
        for name in ("battery_kwh", "init_soc", "trip_kwh", "long_trip_kwh", "trips_per_day"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo <= hi):
                fail(name, f"range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        for name in ("reserve_soc", "long_trip_prob", "day_level", "shift_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                fail(name, "must lie in [0, 1]")
        if self.heterogeneity < 0 or not math.isfinite(self.heterogeneity):
            fail("heterogeneity", "must be finite and >= 0")
        if self.battery_kwh[0] <= 0:
            fail("battery_kwh", "batteries must be positive")
        if not 0 <= self.day_start < self.day_end <= 24:
            fail("day_start", "need 0 <= day_start < day_end <= 24")
        if self.init_soc[0] < self.reserve_soc or self.init_soc[1] > 1:
            fail("init_soc", "initial SOC must lie in [reserve_soc, 1]")
        usable = self.battery_kwh[0] * (1.0 - self.reserve_soc)
        if self.trip_kwh[1] > usable:
            fail("trip_kwh", f"a trip needs up to {self.trip_kwh[1]} kWh but the smallest "
                             f"battery only holds {usable:.6g} kWh above the reserve")
        if self.long_trip_prob > 0 and self.long_trip_kwh[1] > usable:
            fail("long_trip_kwh", f"a long trip needs up to {self.long_trip_kwh[1]} kWh but the "
                                  f"smallest battery only holds {usable:.6g} kWh above the reserve")
        if not 0 <= self.shift_hours < 24:
            fail("shift_hours", "must lie in [0, 24)")
        if not 0 <= self.jitter_hours <= min(self.day_start, 12):
            fail("jitter_hours", "must lie in [0, min(day_start, 12)]")
        if self.max_retries < 0:
            fail("max_retries", "must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "GenConfig":
        """Build from string or typed values (e.g. an INI section); unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ScenarioError(f"unknown generator parameter {key!r}")
            default = getattr(defaults, key)
            try:
                kwargs[key] = _coerce(raw, default)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"invalid generator parameter {key}: {exc}") from None
        return cls(**kwargs)


def _coerce(raw, default):
    if isinstance(default, tuple):
        parts = raw if isinstance(raw, (tuple, list)) else [x for x in str(raw).replace(",", " ").split()]
        if len(parts) != 2:
            raise ValueError(f"expected two values, got {raw!r}")
        kind = type(default[0])
        return tuple(kind(float(x)) if kind is int else float(x) for x in parts)
    if isinstance(default, bool):
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        value = float(raw)
        if value != int(value):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    return float(raw)


def _sample_itinerary(rng: np.random.Generator, cfg: GenConfig, home: int, work: int,
                      feeder_w: np.ndarray, allow_trips: bool, shift: int = 0):
    T = cfg.horizon
    gamma = np.full(T, home, dtype=np.int64)
    demand = np.zeros(T)
    if not allow_trips:
        return gamma, demand
    n_days = -(-T // 24)
    for day in range(n_days):
        k = int(rng.integers(cfg.trips_per_day[0], cfg.trips_per_day[1] + 1))
        if k == 0:
            continue
        hours = np.arange(cfg.day_start, cfg.day_end)
        starts = np.sort(rng.choice(hours, size=min(k, hours.size), replace=False))
        trips = []
        free_from = cfg.day_start
        for h in starts:
            long = rng.random() < cfg.long_trip_prob
            energy = rng.uniform(*(cfg.long_trip_kwh if long else cfg.trip_kwh))
            length = 2 if long else 1
            h = max(int(h), free_from)
            if h + length > cfg.day_end:
                break
            trips.append((h, length, energy))
            free_from = h + length + 1  # at least one slot parked between trips
        for j, (h, length, energy) in enumerate(trips):
            t0 = day * 24 + h + shift
            if t0 >= T:
                break
            t1 = min(t0 + length, T)
            gamma[t0:t1] = AWAY
            demand[t0:t1] = energy / (t1 - t0)
            if j == len(trips) - 1:
                dest = home
            elif j == 0:
                dest = work
            else:
                dest = int(rng.choice(feeder_w.size, p=feeder_w))
            nxt = day * 24 + shift + trips[j + 1][0] if j + 1 < len(trips) else T
            gamma[t1:min(nxt, T)] = dest
    return gamma, demand


def max_charge_trajectory(e_init, p_max, demand, e_max):
    """Energy path when charging as fast as possible without exceeding the cap."""
    e = np.empty_like(demand)
    level = e_init
    for t in range(demand.size):
        p = min(p_max[t], max(0.0, e_max[t] - level + demand[t]))
        level = level + p - demand[t]
        e[t] = level
    return e


def _generate_ev(cfg: GenConfig, i: int, feeder_w: np.ndarray, work_w: np.ndarray):
    rng = np.random.default_rng([cfg.seed, 0, i])
    battery = float(rng.uniform(*cfg.battery_kwh))
    e_init = float(rng.uniform(*cfg.init_soc) * battery)
    home = int(rng.choice(cfg.n_feeders, p=feeder_w))
    work = int(rng.choice(cfg.n_feeders, p=work_w))
    shift = cfg.shift_hours if rng.random() < cfg.shift_prob else 0
    shift += int(rng.integers(-cfg.jitter_hours, cfg.jitter_hours + 1))
    T = cfg.horizon
    e_max = np.full(T, battery)
    e_min = np.full(T, cfg.reserve_soc * battery)
    e_min[-1] = max(e_min[-1], e_init)
    for attempt in range(cfg.max_retries + 2):
        allow = attempt <= cfg.max_retries
        gamma, demand = _sample_itinerary(rng, cfg, home, work, feeder_w, allow, shift)
        p_max = np.where(gamma == AWAY, 0.0, cfg.charger_kw)
        witness = max_charge_trajectory(e_init, p_max, demand, e_max)
        if np.all(witness >= e_min - 1e-9):
            break
    profile = EvProfile(np.zeros(T), p_max, e_min, e_max, e_init, demand,
                        id=f"EV{i:06d}", battery_kwh=battery)
    return profile, gamma, home, work, not allow


def generate_scenario(config: GenConfig) -> Scenario:
    """Deterministic synthetic scenario; every EV carries a feasible witness plan."""
    config.validate()
    S = config.n_feeders
    frng = np.random.default_rng([config.seed, 1])
    feeder_w = frng.dirichlet(np.full(S, config.home_concentration))
    work_w = frng.dirichlet(np.full(S, config.work_concentration))
    het = np.exp(config.heterogeneity * frng.standard_normal(S))

    profiles, rows = [], []
    assoc = np.zeros(S)
    fallbacks = 0
    for i in range(config.n_evs):
        prof, gamma, home, work, fell_back = _generate_ev(config, i, feeder_w, work_w)
        profiles.append(prof)
        rows.append(gamma)
        assoc[home] += 1.0
        assoc[work] += 0.5
        fallbacks += fell_back

    hours = np.arange(config.horizon) % 24
    shape = np.where((hours >= config.day_start) & (hours < config.day_end), config.day_level, 1.0)
    cap_kw = config.capacity_kw_per_ev * np.maximum(assoc, 1.0) * het
    capacity = (cap_kw[:, None] * shape[None, :]) * DEFAULT_UNIT_SCALE
    notes = (f"{fallbacks} EV(s) fell back to a trip-free week",) if fallbacks else ()
    return Scenario(profiles, LocationMap(np.stack(rows), S), FeederSeries(capacity),
                    unit_scale=DEFAULT_UNIT_SCALE, notes=notes)


# ---------------------------------------------------------------- CSV I/O

def _fmt(x: float) -> str:
    return repr(float(x))


def save_scenario(scenario: Scenario, directory) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ids = scenario.feeders.ids
    paths = [out / EVS_CSV, out / TRAJECTORY_CSV, out / FEEDERS_CSV]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVS_HEADER)
        for prof in scenario.profiles:
            w.writerow([prof.id, _fmt(prof.battery), _fmt(prof.e_init)])
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        gamma = scenario.location.gamma
        for i, prof in enumerate(scenario.profiles):
            for t in range(scenario.T):
                s = gamma[i, t]
                w.writerow([prof.id, t, AWAY_TOKEN if s == AWAY else ids[s],
                            _fmt(prof.demand[t]), _fmt(prof.p_min[t]), _fmt(prof.p_max[t]),
                            _fmt(prof.e_min[t]), _fmt(prof.e_max[t])])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEEDERS_HEADER)
        for s, fid in enumerate(ids):
            for t in range(scenario.T):
                w.writerow([fid, t, _fmt(scenario.capacity[s, t])])
    return paths


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ScenarioError(f"{path.name}: empty file, expected header {header}") from None
        if [h.strip() for h in got] != header:
            raise ScenarioError(f"{path.name}: header {got} does not match {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ScenarioError(f"{path.name} line {lineno}: expected {len(header)} columns, got {len(row)}")
            yield lineno, row


def _number(path, lineno, column, text, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise ScenarioError(f"{path.name} line {lineno}, column {column}: cannot parse {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise ScenarioError(f"{path.name} line {lineno}, column {column}: non-finite value {text!r}")
    return value


def load_scenario(directory, drop: bool = True) -> Scenario:
    """Read the three CSVs from ``directory``; EVs with empty feasible sets are dropped."""
    base = Path(directory)
    paths = {name: base / name for name in (EVS_CSV, TRAJECTORY_CSV, FEEDERS_CSV)}
    for p in paths.values():
        if not p.is_file():
            raise FileNotFoundError(f"missing scenario file {p}")

    feeder_caps: dict[str, dict[int, float]] = {}
    fp = paths[FEEDERS_CSV]
    for lineno, (fid, slot, cap) in _read_rows(fp, FEEDERS_HEADER):
        slot = _number(fp, lineno, "slot", slot, int)
        cap = _number(fp, lineno, "capacity_mw", cap)
        caps = feeder_caps.setdefault(fid, {})
        if slot in caps:
            raise ScenarioError(f"{fp.name} line {lineno}: duplicate slot {slot} for feeder {fid!r}")
        caps[slot] = cap
    if not feeder_caps:
        raise ScenarioError(f"{fp.name}: no feeders")
    T = max(len(c) for c in feeder_caps.values())
    for fid, caps in feeder_caps.items():
        if sorted(caps) != list(range(T)):
            raise ScenarioError(f"{fp.name}: feeder {fid!r} must list slots 0..{T - 1} exactly once")
    feeder_ids = list(feeder_caps)
    feeder_index = {fid: s for s, fid in enumerate(feeder_ids)}
    capacity = np.array([[feeder_caps[f][t] for t in range(T)] for f in feeder_ids])

    evs: dict[str, tuple[float, float]] = {}
    ep = paths[EVS_CSV]
    for lineno, (ev, battery, e_init) in _read_rows(ep, EVS_HEADER):
        if ev in evs:
            raise ScenarioError(f"{ep.name} line {lineno}: duplicate ev_id {ev!r}")
        evs[ev] = (_number(ep, lineno, "battery_kwh", battery), _number(ep, lineno, "e_init_kwh", e_init))

    traj = {ev: np.full((T, 6), np.nan) for ev in evs}
    seen = {ev: np.zeros(T, dtype=bool) for ev in evs}
    tp = paths[TRAJECTORY_CSV]
    for lineno, row in _read_rows(tp, TRAJECTORY_HEADER):
        ev, slot, fid = row[0], row[1], row[2]
        if ev not in evs:
            raise ScenarioError(f"{tp.name} line {lineno}: unknown ev_id {ev!r}")
        slot = _number(tp, lineno, "slot", slot, int)
        if not 0 <= slot < T:
            raise ScenarioError(f"{tp.name} line {lineno}: slot {slot} outside 0..{T - 1}")
        if seen[ev][slot]:
            raise ScenarioError(f"{tp.name} line {lineno}: duplicate slot {slot} for EV {ev!r}")
        if fid == AWAY_TOKEN:
            s = AWAY
        elif fid in feeder_index:
            s = feeder_index[fid]
        else:
            raise ScenarioError(f"{tp.name} line {lineno}, column feeder_id: unknown feeder {fid!r}")
        vals = [_number(tp, lineno, TRAJECTORY_HEADER[c], row[c]) for c in range(3, 8)]
        traj[ev][slot] = [s, *vals]
        seen[ev][slot] = True

    profiles, gammas = [], []
    for ev, (battery, e_init) in evs.items():
        if not seen[ev].all():
            missing = int(np.flatnonzero(~seen[ev])[0])
            raise ScenarioError(f"{tp.name}: EV {ev!r} has no row for slot {missing}")
        data = traj[ev]
        gammas.append(data[:, 0].astype(np.int64))
        profiles.append(EvProfile(data[:, 2], data[:, 3], data[:, 4], data[:, 5], e_init,
                                  data[:, 1], id=ev, battery_kwh=battery))
    location = LocationMap(np.stack(gammas) if gammas else np.zeros((0, T), dtype=np.int64),
                           len(feeder_ids))
    scenario = Scenario(profiles, location, FeederSeries(capacity, tuple(feeder_ids)))
    if drop:
        scenario, _ = drop_infeasible(scenario)
    return scenario


# ---------------------------------------------------------------- baseline

def asap_plus(scenario: Scenario, low_soc: float = 0.5, full_soc: float = 1.0) -> np.ndarray:
    """Uncoordinated baseline profiles (I x T kW).

    On arrival below ``low_soc`` of battery capacity an EV charges at full
    power until it reaches ``full_soc``; otherwise it draws only the minimum
    power that keeps the rest of its itinerary feasible.
    """
    I, T = scenario.n_evs, scenario.T
    if I == 0:
        return np.zeros((0, T))
    b = scenario.bounds
    present = scenario.location.present
    battery = scenario.battery
    cum_demand = np.cumsum(scenario.demand, axis=1)
    out = np.zeros((I, T))
    prev = np.zeros(I)
    charging = np.zeros(I, dtype=bool)
    for t in range(T):
        soc = scenario.e_init + prev - (cum_demand[:, t - 1] if t else 0.0)
        arrival = present[:, t] & (~present[:, t - 1] if t else True)
        charging = np.where(arrival, soc < low_soc * battery, charging & present[:, t])
        lo = np.maximum(b.b_min[:, t], prev + b.p_min[:, t])
        hi = np.minimum(b.b_max[:, t], prev + b.p_max[:, t])
        target = np.where(charging, b.p_max[:, t], 0.0)
        cur = np.minimum(np.maximum(prev + target, lo), hi)
        out[:, t] = cur - prev
        prev = cur
        soc_now = scenario.e_init + prev - cum_demand[:, t]
        charging &= soc_now < full_soc * battery - 1e-9
    return out


# ---------------------------------------------------------------- metrics

def peak_valley_ratio(series) -> Optional[float]:
    series = np.asarray(series, dtype=float)
    if series.size == 0 or series.min() <= 0:
        return None
    return float(series.max() / series.min())


@dataclass(frozen=True)
class MetricsReport:
    total_max_violation: float
    per_feeder_violation: np.ndarray
    feeders_over_threshold: int
    threshold: float
    pvr_load: Optional[float]
    pvr_overload: Optional[float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_feeder_violation"] = [float(x) for x in self.per_feeder_violation]
        return d


def metrics(loads, caps, threshold: float = 0.1) -> MetricsReport:
    loads = np.atleast_2d(np.asarray(loads, dtype=float))
    caps = np.atleast_2d(np.asarray(caps, dtype=float))
    if loads.shape != caps.shape:
        raise ValueError(f"load shape {loads.shape} differs from capacity shape {caps.shape}")
    v = feeder_violation(loads, caps) if loads.size else np.zeros(loads.shape[0])
    return MetricsReport(
        total_max_violation=float(v.sum()),
        per_feeder_violation=v,
        feeders_over_threshold=int((v > threshold).sum()),
        threshold=float(threshold),
        pvr_load=peak_valley_ratio(loads.sum(axis=0)),
        pvr_overload=peak_valley_ratio(np.maximum(loads - caps, 0.0).sum(axis=0)),
    )


# ---------------------------------------------------------------- fixtures

REGRESSION_SEED = 2024


def regression_config(**overrides) -> GenConfig:
    """The fixed 1000-EV, 20-feeder, one-week scenario used for end-to-end checks.

    Capacity is tighter than the generator default so that uncoordinated
    charging overloads most feeders.
    """
    base = dict(n_evs=1000, n_feeders=20, horizon=168, seed=REGRESSION_SEED,
                capacity_kw_per_ev=0.6)
    base.update(overrides)
    return GenConfig(**base)


def regression_scenario(**overrides) -> Scenario:
    return generate_scenario(regression_config(**overrides))


def s1_benchmark_problems(count: int = 8192, seed: int = 7, min_weekly_kwh: float = 60.0,
                          xi_range=(-1.0, 2.0)):
    """Feasible sets and anchors for the batched primal-step benchmark.

    EVs come from the generator, keeping only those whose weekly driving
    demand exceeds ``min_weekly_kwh``; the anchor of slot t is
    ``p_min + xi (p_max - p_min)`` with ``xi`` uniform on ``xi_range``.
    Returns ``(bounds, anchor)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = int(count * 1.15) + 64
    while True:
        sc = generate_scenario(GenConfig(n_evs=n, seed=seed))
        keep = np.flatnonzero(sc.demand.sum(axis=1) > min_weekly_kwh)
        if keep.size >= count:
            break
        n *= 2
    b = sc.bounds.take(keep[:count])
    rng = np.random.default_rng(seed)
    xi = rng.uniform(xi_range[0], xi_range[1], b.p_min.shape)
    return b, b.p_min + xi * (b.p_max - b.p_min)
