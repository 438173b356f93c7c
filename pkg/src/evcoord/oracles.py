"""Independent reference solvers used to validate the production kernels.

Nothing here is on the hot path.  Each oracle either certifies its own answer
(duality gap, exhaustive enumeration) or follows a different algorithm from
the production code (plain projected gradient instead of Adam, golden-section
search instead of sorting, dense per-EV ADMM instead of the reduced loop).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ev_solver import (EvBatch, EvInstance, SolverOptions, duality_gap,
                        operator_norm_sq, solve_batch)
from .model import (AWAY, CumulativeBounds, EvProfile, FeederSeries, LocationMap, Scenario,
                    bounds_from_band, grid_cost,
                    project_feasible, project_feasible_batch)


class OracleFailure(RuntimeError):
    """The oracle could not certify its answer (a test-infrastructure error)."""


# ---------------------------------------------------------------- S1 / D1

@dataclass(frozen=True)
class OracleSolution:
    p: np.ndarray
    phi: float
    gap: float
    iterations: int
    u: np.ndarray


def _pga_stack(a, curv, const, b: CumulativeBounds, tol, max_iter, check_every):
    # projected gradient ascent on the dual with step 1/L, one row per instance
    B, T = a.shape
    eta = curv / (2.0 * operator_norm_sq(T))
    u_lo = np.zeros((B, T))
    u_hi = np.zeros((B, T))
    active = np.ones(B, dtype=bool)
    done_at = np.full(B, -1)
    out_u = np.zeros((B, 2 * T))

    def primal(lo, hi, rows):
        w = np.cumsum((lo - hi)[:, ::-1], axis=1)[:, ::-1]
        return np.clip((a[rows] + w) / curv[rows, None], b.p_min[rows], b.p_max[rows])

    def gaps(rows, lo, hi):
        p = primal(lo, hi, rows)
        cum = np.cumsum(p, axis=1)
        obj = lambda x: np.sum((0.5 * curv[rows, None] * x - a[rows]) * x, axis=1) + const[rows]
        psi = obj(p) + np.sum(lo * (b.s_min[rows] - cum) + hi * (cum - b.s_max[rows]), axis=1)
        feas, _ = project_feasible_batch(p, b.take(rows))
        phi = obj(feas)
        return (phi - psi) / np.maximum(np.maximum(np.abs(phi), np.abs(psi)), 1.0)

    k = 0
    while True:
        rows = np.flatnonzero(active)
        if k % check_every == 0 or k >= max_iter:
            g = gaps(rows, u_lo[rows], u_hi[rows])
            fin = rows[g <= tol]
            done_at[fin] = k
            out_u[fin] = np.concatenate([u_lo[fin], u_hi[fin]], axis=1)
            active[fin] = False
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            if k >= max_iter:
                raise OracleFailure(f"{rows.size} instance(s) not certified within {max_iter} iterations")
        p = primal(u_lo[rows], u_hi[rows], rows)
        cum = np.cumsum(p, axis=1)
        step = eta[rows, None]
        u_lo[rows] = np.maximum(u_lo[rows] + step * (b.s_min[rows] - cum), 0.0)
        u_hi[rows] = np.maximum(u_hi[rows] + step * (cum - b.s_max[rows]), 0.0)
        k += 1
    return out_u, done_at


def oracle_s1_many(instances, tol: float = 1e-6, max_iter: int = 10 ** 7,
                   check_every: int = 50) -> list[OracleSolution]:
    """Certified solutions for a list of instances (any mix of horizons)."""
    instances = list(instances)
    results: list[Optional[OracleSolution]] = [None] * len(instances)
    by_T: dict[int, list[int]] = {}
    for idx, inst in enumerate(instances):
        by_T.setdefault(inst.T, []).append(idx)
    for T, idxs in by_T.items():
        batch = EvBatch.from_instances([instances[i] for i in idxs])
        u, iters = _pga_stack(batch.linear, batch.curv, batch.const, batch.bounds,
                              tol, max_iter, check_every)
        for row, idx in enumerate(idxs):
            inst = instances[idx]
            u_row = u[row]
            lo, hi = u_row[:T], u_row[T:]
            w = np.cumsum((lo - hi)[::-1])[::-1]
            p = np.clip((inst.linear + w) / inst.curv, inst.bounds.p_min, inst.bounds.p_max)
            feas = project_feasible(p, inst.bounds)
            if feas is None:
                raise OracleFailure("instance has an empty feasible set")
            # the certificate, not the iteration, vouches for the answer
            gap = duality_gap(feas, u_row, inst)
            if gap > tol:
                raise OracleFailure(f"certificate {gap:.3g} exceeds tolerance {tol:.3g}")
            phi = float(np.sum((0.5 * inst.curv * feas - inst.linear) * feas) + inst.const)
            results[idx] = OracleSolution(feas, phi, gap, int(iters[row]), u_row)
    return results


def oracle_s1(inst: EvInstance, tol: float = 1e-6, max_iter: int = 10 ** 7) -> OracleSolution:
    """Projected gradient ascent with step ``1/L`` until the duality gap is at most ``tol``."""
    if not tol > 0:
        raise ValueError("tol must be > 0")
    return oracle_s1_many([inst], tol, max_iter)[0]


# ---------------------------------------------------------------- S2 / D2

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _s2_fdiff(x, y, delta, rho):
    # f(x) - f(y) for f(v) = v + rho/2 sum([delta - v]^+)^2, in a cancellation-free form
    px = np.maximum(delta - x[:, None], 0.0)
    py = np.maximum(delta - y[:, None], 0.0)
    return (x - y) + 0.5 * rho * np.sum((px - py) * (px + py), axis=1)


def oracle_s2_batch(target, cap, rho_over_i, tol: float = 1e-13, max_iter: int = 400) -> np.ndarray:
    """Golden-section minimisation of the one-dimensional reduction, row-wise."""
    delta = np.atleast_2d(np.asarray(target, float) - np.asarray(cap, float))
    rho = np.broadcast_to(np.asarray(rho_over_i, float), delta.shape[:1]).astype(float)
    lo = np.zeros(delta.shape[0])
    hi = np.maximum(delta.max(axis=1), 0.0)
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol * np.maximum(1.0, hi)):
            break
        left = _s2_fdiff(c, d, delta, rho) < 0   # minimum lies in [lo, d]
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c = hi - _INV_PHI * (hi - lo)
        d = lo + _INV_PHI * (hi - lo)
    v = 0.5 * (lo + hi)
    # the endpoints of the bracket are candidates too (minimum at v = 0 is common)
    v = np.where(_s2_fdiff(np.zeros_like(v), v, delta, rho) <= 0, 0.0, v)
    return v


def oracle_s2(target, cap, rho_over_i: float, tol: float = 1e-13) -> float:
    return float(oracle_s2_batch(np.asarray(target, float)[None], np.asarray(cap, float)[None],
                                 rho_over_i, tol)[0])


def s2_objective_1d(v, target, cap, rho_over_i: float) -> float:
    delta = np.asarray(target, float) - np.asarray(cap, float)
    return float(v + 0.5 * rho_over_i * np.sum(np.maximum(delta - v, 0.0) ** 2))


def d2_case(price) -> int:
    """Which branch of the grid dual analysis applies: 1 negative price, 2 total above one, 3 finite."""
    price = np.asarray(price, float)
    if price.min() < 0:
        return 1
    if price.sum() > 1:
        return 2
    return 3


def d2_ray_value(price, cap, scale: float) -> float:
    """Objective ``v - <price, l>`` along the ray that certifies unboundedness of cases 1 and 2."""
    price = np.asarray(price, float)
    cap = np.asarray(cap, float)
    case = d2_case(price)
    if case == 1:
        t0 = int(np.argmin(price))
        l = cap.copy()
        l[t0] -= scale
        return float(-(price @ l))
    if case == 2:
        v = scale
        return float(v - price @ (cap + v))
    return float(-(price @ cap))


def d2_sampled_min(price, cap, rng: np.random.Generator, n: int = 1000) -> float:
    """Best objective among ``n`` random feasible points ``(v, l)`` with ``l <= cap + v``."""
    price = np.asarray(price, float)
    cap = np.asarray(cap, float)
    v = rng.exponential(1.0, size=n)
    slack = rng.exponential(1.0, size=(n, cap.size)) * (rng.random((n, cap.size)) < 0.5)
    l = cap[None, :] + v[:, None] - slack
    return float(np.min(v - l @ price))


# ---------------------------------------------------------------- operator norm

def power_iteration_norm_sq(T: int, tol: float = 1e-15, max_iter: int = 100000) -> float:
    """Largest eigenvalue of ``H H^T`` for the dense T x T prefix-sum matrix ``H``."""
    H = np.tril(np.ones((T, T)))
    M = H @ H.T
    x = np.linspace(1.0, 2.0, T)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = M @ x
        new = float(x @ y)
        x = y / np.linalg.norm(y)
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    raise OracleFailure("power iteration did not converge")


# ---------------------------------------------------------------- feasibility

@dataclass(frozen=True)
class LabeledInstance:
    bounds: CumulativeBounds
    feasible: bool
    family: str


def _witness_instance(rng, T):
    p_min = np.where(rng.random(T) < 0.6, 0.0, rng.uniform(-3.0, 3.0, T))
    width = np.where(rng.random(T) < 0.1, 0.0, rng.uniform(0.0, 10.0, T))
    p_max = p_min + width
    p = p_min + rng.random(T) * width
    S = np.cumsum(p)
    lo_slack = np.where(rng.random(T) < 0.3, 0.0, rng.exponential(3.0, T))
    hi_slack = np.where(rng.random(T) < 0.3, 0.0, rng.exponential(3.0, T))
    if rng.random() < 0.2:
        lo_slack = lo_slack + 1e3   # loose band below the box (raw-band chain fails)
    return bounds_from_band(p_min, p_max, S - lo_slack, S + hi_slack)


def _imbalance_instance(rng, T):
    b = _witness_instance(rng, T)
    s_min, s_max = b.s_min.copy(), b.s_max.copy()
    a = int(rng.integers(0, T))
    e = int(rng.integers(a, T))
    before_hi = s_max[a - 1] if a > 0 else 0.0
    before_lo = s_min[a - 1] if a > 0 else 0.0
    excess = rng.uniform(1e-3, 5.0)
    if rng.random() < 0.5:
        # more energy required by slot e than the box can deliver after slot a-1
        s_min[e] = before_hi + b.p_max[a:e + 1].sum() + excess
        s_max[e] = max(s_max[e], s_min[e] + rng.uniform(0.0, 3.0))
    else:
        # minimum power forces more energy than the band allows by slot e
        s_max[e] = before_lo + b.p_min[a:e + 1].sum() - excess
        s_min[e] = min(s_min[e], s_max[e] - rng.uniform(0.0, 3.0))
    return bounds_from_band(b.p_min, b.p_max, s_min, s_max)


def _hidden_pattern_instance(rng, T):
    # box [0, c] on three slots with S_1 <= 0 and S_2 <= c/2 but S_3 = 3c required,
    # preceded by free slots; every pairwise ordering check passes
    c = rng.uniform(0.5, 10.0)
    pad = T - 3
    p_min = np.zeros(T)
    p_max = np.full(T, c)
    base = np.zeros(pad)
    s_min = np.concatenate([base, [0.0, 0.0, 3 * c]])
    s_max = np.concatenate([base, [0.0, 0.5 * c, 3 * c]])
    return bounds_from_band(p_min, p_max, s_min, s_max)


def labeled_feasibility_instances(seed: int, count: int, t_range=(1, 12)) -> list[LabeledInstance]:
    """Instances with ground-truth labels known by construction.

    * ``witness``: built around a sampled feasible profile.
    * ``imbalance``: a window whose energy requirement the power box cannot meet.
    * ``hidden``: the three-slot pattern that passes every ordering check but is empty.
    """
    rng = np.random.default_rng(seed)
    lo, hi = t_range
    out = []
    for j in range(count):
        kind = j % 3
        if kind == 2 and hi >= 3:
            T = int(rng.integers(max(lo, 3), hi + 1))
            out.append(LabeledInstance(_hidden_pattern_instance(rng, T), False, "hidden"))
            continue
        T = int(rng.integers(lo, hi + 1))
        if kind == 0:
            out.append(LabeledInstance(_witness_instance(rng, T), True, "witness"))
        else:
            out.append(LabeledInstance(_imbalance_instance(rng, T), False, "imbalance"))
    return out


def brute_force_nonempty(bounds: CumulativeBounds) -> bool:
    """Exhaustive search over integer profiles; exact for integer data.

    The constraint matrix (identity stacked on a prefix-sum matrix) is totally
    unimodular, so a nonempty set with integer bounds contains an integer point.
    """
    lo = np.ceil(bounds.p_min - 1e-12).astype(int)
    hi = np.floor(bounds.p_max + 1e-12).astype(int)
    if np.any(lo > hi):
        return False
    for p in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        cum = np.cumsum(p)
        if np.all(cum >= bounds.s_min - 1e-12) and np.all(cum <= bounds.s_max + 1e-12):
            return True
    return False


# ---------------------------------------------------------------- dense ADMM

@dataclass
class DenseIterate:
    p: np.ndarray          # I x T
    z: np.ndarray          # I x S x T, per-EV grid copies (MW)
    mu: np.ndarray         # I x S x T, per-EV scaled duals
    zbar: np.ndarray       # S x T
    l: np.ndarray          # S x T
    sharing_error: float = 0.0


@dataclass
class DenseTrace:
    iterates: list = field(default_factory=list)

    def consensus_spread(self, k: int) -> float:
        mu = self.iterates[k].mu
        return float(np.max(np.abs(mu - mu[:1]))) if mu.shape[0] else 0.0


def incidence_tensors(scenario: Scenario) -> np.ndarray:
    """Materialised ``A[i]`` (S x T x T): ``A[i, s, t, t] = 1`` when EV i sits at feeder s in slot t."""
    I, T = scenario.location.shape
    S = scenario.n_feeders
    A = np.zeros((I, S, T, T))
    for i in range(I):
        for t in range(T):
            s = scenario.location.gamma[i, t]
            if s != AWAY:
                A[i, s, t, t] = 1.0
    return A


def _sharing_lstsq(d: np.ndarray, total: np.ndarray) -> np.ndarray:
    # argmin sum_i ||z_i - d_i||^2 s.t. sum_i z_i = total, via its KKT system
    I = d.shape[0]
    flat_d = d.reshape(I, -1)
    n = flat_d.shape[1]
    K = np.zeros((I * n + n, I * n + n))
    rhs = np.zeros(I * n + n)
    K[:I * n, :I * n] = np.eye(I * n)
    for i in range(I):
        K[i * n:(i + 1) * n, I * n:] = np.eye(n)
        K[I * n:, i * n:(i + 1) * n] = np.eye(n)
    rhs[:I * n] = flat_d.ravel()
    rhs[I * n:] = total.ravel()
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:I * n].reshape(d.shape)


def _polish_level(target, cap, rho, v):
    # v solves 1 = rho * sum_t (delta_t - v)^+ ; with the active set taken
    # from the bracketing estimate the equation is linear in v
    delta = target - cap
    active = delta > v[:, None]
    n = active.sum(axis=1)
    total = np.where(active, delta, 0.0).sum(axis=1)
    exact = (total - 1.0 / rho) / np.maximum(n, 1)
    return np.where(n > 0, np.maximum(exact, 0.0), 0.0)


def dense_admm_small(scenario: Scenario, opts, iters: int,
                     s1_opts: Optional[SolverOptions] = None) -> DenseTrace:
    """Unreduced ADMM with per-EV copies and duals, for equivalence testing.

    ``opts`` is an ``AdmmOptions``; ``s1_opts`` overrides its inner solver
    settings (use a fixed-iteration setting so both paths apply the same map).
    """
    I, T = scenario.location.shape
    S = scenario.n_feeders
    if I > 4 or S > 2 or T > 4:
        raise ValueError("dense ADMM oracle is limited to I <= 4, S <= 2, T <= 4")
    if I == 0:
        raise ValueError("dense ADMM oracle needs at least one EV")
    sigma = scenario.unit_scale
    rho = opts.rho
    kappa = opts.kappa_for(scenario)
    kappa_rho = kappa / (rho * sigma ** 2)
    inner = replace(s1_opts or opts.s1_opts, threads=1)
    A = incidence_tensors(scenario)
    cap = scenario.capacity

    def grid(p):   # sigma * A_i p_i for every i
        return sigma * np.einsum("istu,iu->ist", A, p)

    p, ok = project_feasible_batch(np.zeros((I, T)), scenario.bounds)
    if not ok.all():
        raise ValueError("scenario contains an EV with an empty feasible set")
    z = grid(p)
    mu = np.zeros((I, S, T))
    l = z.sum(axis=0)
    trace = DenseTrace([DenseIterate(p, z, mu, l / I, l)])
    warm = None
    for _ in range(iters):
        b = z - mu
        anchor = np.einsum("istu,ist->iu", A, b) / sigma
        res = solve_batch(EvBatch.s1(anchor, kappa_rho, scenario.bounds), inner, warm)
        warm = res.warm_start() if opts.warm_start else None
        p = res.p
        d = grid(p) + mu
        dbar = d.mean(axis=0)
        # grid update: golden-section level per feeder, then the load it implies
        v = oracle_s2_batch(I * dbar, cap, rho / I)
        v = _polish_level(I * dbar, cap, rho / I, v)
        l = np.minimum(cap + v[:, None], I * dbar)
        zbar = l / I
        z = zbar[None] + d - dbar[None]
        z_ref = _sharing_lstsq(d, l)
        mu = mu + grid(p) - z
        trace.iterates.append(DenseIterate(p, z, mu, zbar, l, float(np.max(np.abs(z - z_ref)))))
    return trace


def dense_weighted_norm(scenario: Scenario, M: np.ndarray) -> float:
    """``sqrt(sum_i ||A_i^T M||^2)`` with the incidence tensors materialised."""
    A = incidence_tensors(scenario)
    return float(np.sqrt(sum(np.sum(np.einsum("stu,st->u", A[i], M) ** 2)
                             for i in range(A.shape[0]))))


def dense_aggregate(scenario: Scenario, p: np.ndarray) -> np.ndarray:
    A = incidence_tensors(scenario)
    return scenario.unit_scale * np.einsum("istu,iu->st", A, p)


def dense_grid_cost(scenario: Scenario, p: np.ndarray) -> float:
    return grid_cost(dense_aggregate(scenario, p), scenario.capacity)


def random_micro_scenario(rng: np.random.Generator) -> Scenario:
    """A random scenario small enough for :func:`dense_admm_small` (I <= 4, S <= 2, T <= 4)."""
    I = int(rng.integers(1, 5))
    S = int(rng.integers(1, 3))
    T = int(rng.integers(1, 5))
    gamma = rng.integers(0, S, size=(I, T))
    gamma[rng.random((I, T)) < 0.2] = AWAY
    profiles = []
    for i in range(I):
        here = gamma[i] != AWAY
        p_max = np.where(here, rng.uniform(1.0, 10.0, T), 0.0)
        battery = 40.0
        e_init = float(rng.uniform(10.0, 20.0))
        demand = np.where(here, 0.0, rng.uniform(0.0, 2.0, T))
        e_min = np.zeros(T)
        # a terminal energy target that the full-power trajectory can reach
        reach = e_init + np.sum(p_max) - np.sum(demand)
        e_min[-1] = max(0.0, min(battery, rng.uniform(0.3, 0.9) * reach))
        profiles.append(EvProfile(np.zeros(T), p_max, e_min, np.full(T, battery),
                                  e_init, demand, id=f"M{i}", battery_kwh=battery))
    cap = rng.uniform(0.0, 0.012, size=(S, T))
    return Scenario(profiles, LocationMap(gamma, S), FeederSeries(cap))
