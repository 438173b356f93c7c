"""Domain model: EV feasibility sets, feeders, scenarios and the objective pieces.

Every per-EV array has the time axis last, so the same functions work on a
single profile of shape ``(T,)`` and on a stacked fleet of shape ``(I, T)``.
EV power is in kW (one slot is one hour, so kW and kWh/slot coincide); grid
quantities are in MW.  The conversion factor lives on the scenario as
``unit_scale`` and is applied only when scattering EV power onto feeders and
when gathering feeder prices back onto EVs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

AWAY = -1
FEAS_TOL = 1e-9
DEFAULT_UNIT_SCALE = 1e-3

# acceptance slack used inside the greedy projection; kept below FEAS_TOL so
# outputs still satisfy every constraint within FEAS_TOL
_ACCEPT_TOL = 1e-10


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def suffix_max(x: np.ndarray) -> np.ndarray:
    """``out[..., t] = max(x[..., t:])``."""
    return np.maximum.accumulate(x[..., ::-1], axis=-1)[..., ::-1]


def suffix_min(x: np.ndarray) -> np.ndarray:
    """``out[..., t] = min(x[..., t:])``."""
    return np.minimum.accumulate(x[..., ::-1], axis=-1)[..., ::-1]


def suffix_sum(x: np.ndarray) -> np.ndarray:
    """Transpose of the prefix-sum operator: ``out[..., t] = sum(x[..., t:])``."""
    return np.cumsum(x[..., ::-1], axis=-1)[..., ::-1]


@dataclass(frozen=True)
class EvProfile:
    """Per-EV power box, energy band, initial energy and trip consumption."""

    p_min: np.ndarray
    p_max: np.ndarray
    e_min: np.ndarray
    e_max: np.ndarray
    e_init: float
    demand: np.ndarray
    id: str = ""
    battery_kwh: Optional[float] = None

    def __post_init__(self):
        for name in ("p_min", "p_max", "e_min", "e_max", "demand"):
            object.__setattr__(self, name, _as_float(getattr(self, name)))
        object.__setattr__(self, "e_init", float(self.e_init))
        shapes = {self.p_min.shape, self.p_max.shape, self.e_min.shape,
                  self.e_max.shape, self.demand.shape}
        if len(shapes) != 1 or self.p_min.ndim != 1 or self.p_min.size < 1:
            raise ValueError(f"EV {self.id!r}: profile vectors must share one length T >= 1, got {shapes}")

    @property
    def T(self) -> int:
        return self.p_min.size

    @property
    def battery(self) -> float:
        if self.battery_kwh is not None:
            return float(self.battery_kwh)
        return float(self.e_max.max())

    def problems(self) -> list[str]:
        """Sanity violations that make the profile unusable (empty list if fine)."""
        out = []
        if np.any(self.p_min > self.p_max):
            out.append("p_min exceeds p_max")
        if np.any(self.demand < 0):
            out.append("negative demand")
        if not 0 <= self.e_init <= self.e_max[0] + self.demand[0]:
            out.append("e_init outside [0, e_max[0] + demand[0]]")
        return out


@dataclass(frozen=True)
class CumulativeBounds:
    """Prefix-sum form of an EV feasibility set (or a stack of them).

    ``s_*`` bound the cumulative charged energy, ``c_*`` are the prefix sums of
    the power box and ``b_*`` the backward envelopes that make the band exact.
    """

    s_min: np.ndarray
    s_max: np.ndarray
    c_min: np.ndarray
    c_max: np.ndarray
    b_min: np.ndarray
    b_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray

    @property
    def T(self) -> int:
        return self.s_min.shape[-1]

    def take(self, idx) -> "CumulativeBounds":
        return CumulativeBounds(*(getattr(self, f)[idx] for f in _BOUND_FIELDS))


_BOUND_FIELDS = ("s_min", "s_max", "c_min", "c_max", "b_min", "b_max", "p_min", "p_max")


def bounds_from_band(p_min, p_max, s_min, s_max) -> CumulativeBounds:
    """Build bounds directly from a power box and a cumulative-energy band."""
    p_min, p_max, s_min, s_max = map(_as_float, (p_min, p_max, s_min, s_max))
    if not (p_min.shape == p_max.shape == s_min.shape == s_max.shape):
        raise ValueError("bound vectors must share one shape")
    c_min = np.cumsum(p_min, axis=-1)
    c_max = np.cumsum(p_max, axis=-1)
    b_min = c_max + suffix_max(s_min - c_max)
    b_max = c_min + suffix_min(s_max - c_min)
    return CumulativeBounds(s_min, s_max, c_min, c_max, b_min, b_max, p_min, p_max)


def bounds_from_energy(p_min, p_max, e_min, e_max, e_init, demand) -> CumulativeBounds:
    e_init = _as_float(e_init)[..., None]
    cum_demand = np.cumsum(_as_float(demand), axis=-1)
    s_min = _as_float(e_min) - e_init + cum_demand
    s_max = _as_float(e_max) - e_init + cum_demand
    return bounds_from_band(p_min, p_max, s_min, s_max)


def derive_bounds(profile: EvProfile) -> CumulativeBounds:
    return bounds_from_energy(profile.p_min, profile.p_max, profile.e_min,
                              profile.e_max, profile.e_init, profile.demand)


def check_necessary(bounds: CumulativeBounds, tol: float = FEAS_TOL):
    """Box and band ordering needed for a nonempty set (bool, or bool array for a stack).

    The chain ``c_min <= s_min <= s_max <= c_max`` is checked on the band
    tightened by the box (``max(s_min, c_min)``, ``min(s_max, c_max)``), which
    describes the same set; on the raw band it would reject EVs whose initial
    energy sits above the minimum.
    """
    ok = ((bounds.p_min <= bounds.p_max + tol)
          & (bounds.s_min <= bounds.s_max + tol)
          & (bounds.s_min <= bounds.c_max + tol)
          & (bounds.c_min <= bounds.s_max + tol))
    return ok.all(axis=-1)


def is_feasible(bounds: CumulativeBounds, tol: float = FEAS_TOL):
    """Envelope test ``b_min <= b_max``; only meaningful once :func:`check_necessary` holds."""
    return (bounds.b_min <= bounds.b_max + tol).all(axis=-1)


def nonempty(bounds: CumulativeBounds, tol: float = FEAS_TOL):
    return check_necessary(bounds, tol) & is_feasible(bounds, tol)


def constraint_violation(p, bounds: CumulativeBounds) -> np.ndarray:
    """Largest violation of any box or band constraint (0 when ``p`` is feasible)."""
    p = _as_float(p)
    cum = np.cumsum(p, axis=-1)
    parts = (bounds.p_min - p, p - bounds.p_max, bounds.s_min - cum, cum - bounds.s_max)
    return np.maximum(0.0, np.max(np.stack(parts), axis=(0, -1)))


def in_set(p, bounds: CumulativeBounds, tol: float = FEAS_TOL):
    return constraint_violation(p, bounds) <= tol


def _greedy_projection(target: np.ndarray, bounds: CumulativeBounds,
                       accept_tol: float = _ACCEPT_TOL) -> np.ndarray:
    # forward pass: clip the running cumulative energy into the envelope,
    # keeping the target value verbatim wherever the clip is inactive
    out = np.empty(np.broadcast_shapes(target.shape, bounds.b_min.shape))
    target = np.broadcast_to(target, out.shape)
    prev = np.zeros(out.shape[:-1])
    for t in range(out.shape[-1]):
        lo = np.maximum(bounds.b_min[..., t], prev + bounds.p_min[..., t])
        hi = np.minimum(bounds.b_max[..., t], prev + bounds.p_max[..., t])
        cand = prev + target[..., t]
        keep = (cand >= lo - accept_tol) & (cand <= hi + accept_tol)
        cur = np.where(keep, cand, np.minimum(np.maximum(cand, lo), hi))
        out[..., t] = np.where(keep, target[..., t], cur - prev)
        prev = cur
    return out


def project_feasible(target, bounds: CumulativeBounds) -> Optional[np.ndarray]:
    """Feasible profile close to ``target`` in O(T), or ``None`` when the set is empty.

    A target that is already feasible is returned unchanged.
    """
    target = _as_float(target)
    if bounds.b_min.ndim != 1:
        raise ValueError("project_feasible takes a single profile; use project_feasible_batch")
    if not nonempty(bounds):
        return None
    return _greedy_projection(target, bounds)


def project_feasible_batch(targets, bounds: CumulativeBounds,
                           accept_tol: float = _ACCEPT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`project_feasible`; infeasible rows come back as NaN.

    Returns ``(profiles, feasible_mask)``.  Slots within ``accept_tol`` of
    their interval are kept verbatim.  ``accept_tol=0`` gives plain clipping,
    a continuous map, which iterative callers want so that round-off in the
    input cannot switch between keeping and clipping.
    """
    targets = _as_float(targets)
    ok = np.asarray(nonempty(bounds))
    out = _greedy_projection(targets, bounds, accept_tol)
    if not ok.all():
        out[~ok] = np.nan
    return out, ok


def ev_cost(p, kappa: float):
    """Battery-degradation style regulariser ``kappa/2 * ||p||^2`` (per row for a stack)."""
    p = _as_float(p)
    return 0.5 * kappa * np.sum(p * p, axis=-1)


def feeder_violation(load, cap):
    """Peak overload ``max_t [load_t - cap_t]^+`` along the last axis."""
    excess = _as_float(load) - _as_float(cap)
    return np.maximum(0.0, excess.max(axis=-1))


def grid_cost(loads, caps) -> float:
    return float(np.sum(feeder_violation(loads, caps)))


@dataclass(frozen=True)
class LocationMap:
    """Feeder index of every EV in every slot; ``AWAY`` marks slots off the network."""

    gamma: np.ndarray
    n_feeders: int

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.int64)
        if gamma.ndim != 2:
            raise ValueError("location map must be an I x T matrix")
        if gamma.size and (gamma.min() < AWAY or gamma.max() >= self.n_feeders):
            raise ValueError("location map entries must be AWAY or a feeder index in [0, S)")
        object.__setattr__(self, "gamma", gamma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.gamma.shape

    @cached_property
    def present(self) -> np.ndarray:
        return self.gamma != AWAY

    @cached_property
    def _flat_cell(self) -> np.ndarray:
        # cell id s*T + t for every (i, t), row-major over EVs so bincount
        # accumulates each cell in ascending EV order
        T = self.gamma.shape[1]
        cells = self.gamma * T + np.arange(T)
        return np.where(self.present, cells, self.n_feeders * T).ravel()

    def scatter(self, values, scale: float = 1.0) -> np.ndarray:
        """``out[s, t] = scale * sum_{i: gamma[i,t] = s} values[i, t]``."""
        I, T = self.gamma.shape
        values = _as_float(values)
        sums = np.bincount(self._flat_cell, weights=values.ravel(),
                           minlength=(self.n_feeders + 1) * T)
        return scale * sums[: self.n_feeders * T].reshape(self.n_feeders, T)

    def gather(self, grid, scale: float = 1.0) -> np.ndarray:
        """``out[i, t] = scale * grid[gamma[i,t], t]`` (zero in AWAY slots)."""
        grid = _as_float(grid)
        T = self.gamma.shape[1]
        vals = grid[np.maximum(self.gamma, 0), np.arange(T)]
        return scale * np.where(self.present, vals, 0.0)

    @cached_property
    def occupancy(self) -> np.ndarray:
        """``N[s, t]``: number of EVs parked at feeder ``s`` in slot ``t``."""
        return self.scatter(np.ones(self.gamma.shape))

    def take(self, idx) -> "LocationMap":
        return LocationMap(self.gamma[idx], self.n_feeders)


def aggregate_load(profiles, location: LocationMap, unit_scale: float = DEFAULT_UNIT_SCALE) -> np.ndarray:
    """Feeder loads in MW from EV profiles in kW."""
    return location.scatter(profiles, unit_scale)


@dataclass(frozen=True)
class FeederSeries:
    capacity: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        cap = _as_float(self.capacity)
        if cap.ndim != 2:
            raise ValueError("capacity must be an S x T matrix")
        if np.any(cap < 0) or not np.all(np.isfinite(cap)):
            raise ValueError("capacity must be finite and nonnegative")
        object.__setattr__(self, "capacity", cap)
        ids = tuple(self.ids) if self.ids else tuple(f"F{s}" for s in range(cap.shape[0]))
        if len(ids) != cap.shape[0]:
            raise ValueError("one feeder id per capacity row required")
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.capacity.shape[0]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    profiles: Sequence[EvProfile]
    location: LocationMap
    feeders: FeederSeries
    kappa: Optional[float] = None
    unit_scale: float = DEFAULT_UNIT_SCALE
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        I, T = self.location.shape
        if len(self.profiles) != I:
            raise ScenarioError(f"{len(self.profiles)} profiles but location map has {I} rows")
        if self.location.n_feeders != self.feeders.n:
            raise ScenarioError("location map and feeder series disagree on S")
        if self.feeders.capacity.shape[1] != T and I > 0:
            raise ScenarioError("capacity horizon differs from location map horizon")
        for i, prof in enumerate(self.profiles):
            if prof.T != T:
                raise ScenarioError(f"EV {prof.id!r} has horizon {prof.T}, expected {T}")
        if I:
            off = ~self.location.present & (self.p_max > 0)
            if off.any():
                i, t = map(int, np.argwhere(off)[0])
                raise ScenarioError(
                    f"EV {self.profiles[i].id!r} slot {t}: AWAY but p_max > 0")

    @property
    def n_evs(self) -> int:
        return len(self.profiles)

    @property
    def n_feeders(self) -> int:
        return self.feeders.n

    @property
    def T(self) -> int:
        return self.feeders.capacity.shape[1]

    @property
    def capacity(self) -> np.ndarray:
        return self.feeders.capacity

    @property
    def ev_ids(self) -> list[str]:
        return [p.id for p in self.profiles]

    def _stack(self, name) -> np.ndarray:
        if not self.profiles:
            return np.zeros((0, self.T))
        return np.stack([getattr(p, name) for p in self.profiles])

    @cached_property
    def p_min(self) -> np.ndarray:
        return self._stack("p_min")

    @cached_property
    def p_max(self) -> np.ndarray:
        return self._stack("p_max")

    @cached_property
    def battery(self) -> np.ndarray:
        return np.array([p.battery for p in self.profiles], dtype=float)

    @cached_property
    def e_init(self) -> np.ndarray:
        return np.array([p.e_init for p in self.profiles], dtype=float)

    @cached_property
    def demand(self) -> np.ndarray:
        return self._stack("demand")

    @cached_property
    def bounds(self) -> CumulativeBounds:
        if not self.profiles:
            z = np.zeros((0, self.T))
            return bounds_from_band(z, z, z, z)
        return bounds_from_energy(self.p_min, self.p_max, self._stack("e_min"),
                                  self._stack("e_max"), self.e_init, self.demand)

    def aggregate(self, profiles) -> np.ndarray:
        return aggregate_load(profiles, self.location, self.unit_scale)

    def subset(self, keep) -> "Scenario":
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep
        return Scenario([self.profiles[i] for i in idx], self.location.take(idx),
                        self.feeders, self.kappa, self.unit_scale, self.notes)


def drop_infeasible(scenario: Scenario) -> tuple[Scenario, list[str]]:
    """Remove EVs with an empty feasibility set, logging one warning per EV dropped."""
    if scenario.n_evs == 0:
        return scenario, []
    ok = np.asarray(nonempty(scenario.bounds))
    for i, prof in enumerate(scenario.profiles):
        if ok[i] and prof.problems():
            ok[i] = False
    dropped = [scenario.profiles[i].id for i in np.flatnonzero(~ok)]
    if not dropped:
        return scenario, []
    for ev in dropped:
        logger.warning("dropping EV %s: infeasible mobility constraints", ev)
    notes = scenario.notes + tuple(f"dropped infeasible EV {ev}" for ev in dropped)
    kept = scenario.subset(ok)
    return Scenario(kept.profiles, kept.location, kept.feeders, kept.kappa,
                    kept.unit_scale, notes), dropped
