"""Oracle-equivalence and invariant checks runnable from an installed package."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .admm import AdmmOptions, init_state, step
from .ev_solver import EvBatch, EvInstance, SolverOptions, lipschitz_constant, solve_batch
from .feeder_solver import UNBOUNDED, solve_d2, solve_s2_batch
from .model import (FEAS_TOL, bounds_from_band, check_necessary, constraint_violation, is_feasible,
                    project_feasible)
from .oracles import (OracleFailure, d2_case, d2_sampled_min, dense_admm_small,
                      labeled_feasibility_instances, oracle_s1_many, oracle_s2_batch,
                      power_iteration_norm_sq, random_micro_scenario)
from .scenario import s1_benchmark_problems


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


# sizes per level: quick keeps the whole run well under two minutes
SIZES = {
    "quick": dict(feas=2000, s1=60, s2=1000, d2=2000, micro=5, micro_iters=20, mask=200,
                  lip=(1, 2, 7, 24, 168), bench=0),
    "full": dict(feas=10000, s1=500, s2=10000, d2=10000, micro=20, micro_iters=50, mask=1000,
                 lip=(1, 2, 7, 24, 168), bench=8192),
}


def check_feasibility(n: int, seed: int = 11) -> str:
    wrong = 0
    for inst in labeled_feasibility_instances(seed, n):
        # the envelope test is only meaningful behind the necessary check
        verdict = bool(check_necessary(inst.bounds)) and bool(is_feasible(inst.bounds))
        proj = project_feasible(np.zeros(inst.bounds.T), inst.bounds)
        if verdict != inst.feasible or (proj is not None) != inst.feasible:
            wrong += 1
        elif proj is not None and constraint_violation(proj, inst.bounds) > FEAS_TOL:
            wrong += 1
    if wrong:
        raise AssertionError(f"{wrong} of {n} labeled instances misclassified")
    return f"{n} labeled instances classified correctly"


def check_lipschitz(horizons) -> str:
    worst = 0.0
    for T in horizons:
        ref = 2.0 * power_iteration_norm_sq(T)
        got = lipschitz_constant(T, "D1", 1.0)
        worst = max(worst, abs(got - ref) / ref)
    if worst > 1e-6:
        raise AssertionError(f"smoothness constant off by {worst:.3g} relative")
    return f"max relative error {worst:.2g}"


def random_ev_instances(rng, n, t_max=8):
    """Mixed S1 / D1 instances on short horizons, small enough for the oracle."""
    out = []
    while len(out) < n:
        T = int(rng.integers(1, t_max + 1))
        p_min = np.where(rng.random(T) < 0.5, 0.0, rng.uniform(-2.0, 2.0, T))
        p_max = p_min + rng.uniform(0.0, 6.0, T)
        S = np.cumsum(p_min + rng.random(T) * (p_max - p_min))
        b = bounds_from_band(p_min, p_max, S - rng.exponential(2.0, T), S + rng.exponential(2.0, T))
        variant = "S1" if rng.random() < 0.5 else "D1"
        reg = float(rng.uniform(1e-3, 1.0)) if variant == "S1" else float(rng.uniform(0.05, 2.0))
        out.append(EvInstance(variant, rng.uniform(-5.0, 8.0, T), reg, b))
    return out


def check_s1_oracle(n: int, seed: int = 12) -> str:
    rng = np.random.default_rng(seed)
    insts = random_ev_instances(rng, n)
    ref = oracle_s1_many(insts, tol=1e-10)
    # constant-step Adam only reaches a neighbourhood of the optimum, so the
    # pointwise comparison runs the gradient path to a tight certified gap
    opts = SolverOptions(optimizer="pga", tol=1e-12, max_iter=200000)
    worst = 0.0
    for T in sorted({inst.T for inst in insts}):
        rows = [j for j, inst in enumerate(insts) if inst.T == T]
        got = solve_batch([insts[j] for j in rows], opts).p
        want = np.stack([ref[j].p for j in rows])
        worst = max(worst, float(np.max(np.abs(got - want))))
    if worst > 1e-3:
        raise AssertionError(f"max |p - p_oracle| = {worst:.3g} kW")
    return f"{n} instances, max |dp| {worst:.2g} kW"


def check_s2_oracle(n: int, seed: int = 13) -> str:
    rng = np.random.default_rng(seed)
    T = 168
    cap = rng.uniform(0.0, 2.0, (n, T))
    target = cap + rng.normal(0.0, 1.0, (n, T)) * rng.uniform(0.0, 2.0, (n, 1))
    rho = rng.uniform(0.01, 100.0, n)
    v, load, xi0, xi = solve_s2_batch(target, cap, rho)
    ref = oracle_s2_batch(target, cap, rho)
    dv = float(np.max(np.abs(v - ref)))
    kkt = max(float(np.max(np.abs(1.0 - xi0 - xi.sum(axis=1)))),
              float(np.max(load - cap - v[:, None])), float(-np.min(v)), float(-np.min(xi)))
    if dv > 1e-7 or kkt > 1e-10:
        raise AssertionError(f"max |dv| {dv:.3g}, KKT residual {kkt:.3g}")
    return f"{n} feeders, max |dv| {dv:.2g} MW, KKT {kkt:.2g}"


def check_d2(n: int, seed: int = 14) -> str:
    rng = np.random.default_rng(seed)
    bad = 0
    for j in range(n):
        T = int(rng.integers(1, 10))
        cap = rng.uniform(0.0, 3.0, T)
        lam = rng.dirichlet(np.ones(T)) * [1 - 1e-9, 1.0, 1 + 1e-9, rng.uniform(0, 2)][j % 4]
        if j % 7 == 0:
            lam[0] = -abs(lam[0]) - 1e-12
        val = solve_d2(lam, cap)
        if (val is UNBOUNDED) != (d2_case(lam) != 3):
            bad += 1
        elif val is not UNBOUNDED and d2_sampled_min(lam, cap, rng, 50) < val - 1e-12:
            bad += 1
    if bad:
        raise AssertionError(f"{bad} of {n} grid dual values wrong")
    return f"{n} price vectors"


def check_sharing(n: int, iters: int, seed: int = 15) -> str:
    rng = np.random.default_rng(seed)
    # fixed-iteration inner map: with tol=0 a gap that rounds to <= 0 could
    # stop a row early on one side only
    inner = SolverOptions(optimizer="pga", tol=-math.inf, max_iter=60, masking=False)
    worst = spread = 0.0
    for _ in range(n):
        sc = random_micro_scenario(rng)
        opts = AdmmOptions(rho=float(rng.uniform(0.5, 50.0)), s1_opts=inner)
        dense = dense_admm_small(sc, opts, iters)
        state = init_state(sc, opts)
        for k in range(1, iters + 1):
            state = step(state, sc, opts)
            it = dense.iterates[k]
            worst = max(worst, float(np.max(np.abs(state.p - it.p))),
                        float(np.max(np.abs(state.mu - it.mu[0]))))
            spread = max(spread, dense.consensus_spread(k))
    if worst > 1e-9 or spread > 1e-12:
        raise AssertionError(f"reduced vs dense deviation {worst:.3g}, dual spread {spread:.3g}")
    return f"{n} micro-instances x {iters} iterations, deviation {worst:.2g}"


def check_masking(n: int, seed: int = 16) -> str:
    bounds, anchor = s1_benchmark_problems(n, seed)
    batch = EvBatch.s1(anchor, 1e-3, bounds)
    opts = SolverOptions(tol=1e-2, max_iter=200)
    on = solve_batch(batch, opts)
    off = solve_batch(batch, replace(opts, masking=False))
    diff = float(np.max(np.abs(on.p - off.p)))
    if diff > 1e-9 or not np.array_equal(on.iterations, off.iterations):
        raise AssertionError(f"masking changed results by {diff:.3g}")
    if on.converged.any() and not on.inner_iterations < off.inner_iterations:
        raise AssertionError("masking did not reduce inner iterations")
    return f"{on.inner_iterations} vs {off.inner_iterations} inner iterations"


def check_benchmark(n: int) -> str:
    bounds, anchor = s1_benchmark_problems(n)
    batch = EvBatch.s1(anchor, 1e-3, bounds)
    fracs = []
    for it in (100, 200):
        res = solve_batch(batch, SolverOptions(tol=1e-2, max_iter=it))
        if np.any(res.psi > res.phi + 1e-9 * np.maximum(1.0, np.abs(res.phi))):
            raise AssertionError("a reported gap is not a valid bound")
        fracs.append(float(res.converged.mean()))
    if fracs[0] < 0.95 or fracs[1] < 0.98:
        raise AssertionError(f"converged fractions {fracs[0]:.4f} / {fracs[1]:.4f}")
    return f"{n} instances: {fracs[0]:.2%} within 100, {fracs[1]:.2%} within 200 iterations"


def checks(level: str) -> list[tuple[str, Callable[[], str]]]:
    if level not in SIZES:
        raise ValueError(f"unknown level {level!r}")
    z = SIZES[level]
    out = [
        ("feasibility-oracle", lambda: check_feasibility(z["feas"])),
        ("lipschitz-constant", lambda: check_lipschitz(z["lip"])),
        ("ev-subproblem-oracle", lambda: check_s1_oracle(z["s1"])),
        ("feeder-subproblem-oracle", lambda: check_s2_oracle(z["s2"])),
        ("grid-dual-cases", lambda: check_d2(z["d2"])),
        ("sharing-reduction", lambda: check_sharing(z["micro"], z["micro_iters"])),
        ("masking-neutrality", lambda: check_masking(z["mask"])),
    ]
    if z["bench"]:
        out.append(("ev-subproblem-benchmark", lambda: check_benchmark(z["bench"])))
    return out


def run_selftest(level: str = "quick") -> list[CheckResult]:
    results = []
    for name, fn in checks(level):
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except (AssertionError, OracleFailure, ValueError) as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
