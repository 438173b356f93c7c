import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcoord.feeder_solver import (UNBOUNDED, s2_objective, solve_d2, solve_d2_batch, solve_s2,
                                   solve_s2_batch)
from evcoord.oracles import d2_case, d2_ray_value, d2_sampled_min, oracle_s2, oracle_s2_batch


def kkt_residual(target, cap, rho, sol):
    """Largest violation among the stationarity, feasibility and complementarity conditions."""
    target, cap = np.asarray(target, float), np.asarray(cap, float)
    v, l, xi0, xi = sol.v, sol.load, sol.xi0, sol.xi
    return max(
        abs(1.0 - xi0 - xi.sum()),                     # stationarity in v
        np.max(np.abs(rho * (l - target) + xi)),       # stationarity in l
        np.max(l - cap - v, initial=0.0),              # primal feasibility
        -v, -xi0, -np.min(xi),                         # sign constraints
        abs(xi0 * v),                                  # complementarity of v >= 0
        np.max(np.abs(xi * (l - cap - v))),            # complementarity of l <= C + v
    )


def test_underloaded_feeder():
    sol = solve_s2([1.0, 0.5], [2.0, 2.0], 3.0)
    assert sol.v == 0 and sol.xi0 == 1
    np.testing.assert_array_equal(sol.load, [1.0, 0.5])
    np.testing.assert_array_equal(sol.xi, 0)


def test_two_slot_worked_instance():
    sol = solve_s2([3.0, 2.0], [1.0, 1.0], 1.0)
    assert sol.v == 1.0 and sol.xi0 == 0
    np.testing.assert_array_equal(sol.load, [2.0, 2.0])
    np.testing.assert_array_equal(sol.xi, [1.0, 0.0])
    assert s2_objective(sol.v, sol.load, [3.0, 2.0], 1.0) == 1.5
    assert oracle_s2([3.0, 2.0], [1.0, 1.0], 1.0) == pytest.approx(1.0, abs=1e-8)


def test_boundary_takes_zero_level():
    sol = solve_s2([1.0], [0.0], 1.0)
    assert sol.v == 0 and sol.xi0 == 0
    np.testing.assert_array_equal(sol.xi, [1.0])
    assert kkt_residual([1.0], [0.0], 1.0, sol) == 0


def test_oracle_at_nonpositive_excess():
    assert oracle_s2([0.0, 1.0], [1.0, 2.0], 5.0) == 0.0


def test_kkt_and_oracle_on_random_feeders():
    rng = np.random.default_rng(0)
    n, T = 1000, 168
    cap = rng.uniform(0, 2, (n, T))
    target = cap + rng.normal(0, 1, (n, T)) * rng.uniform(0, 2, (n, 1))
    rho = rng.uniform(0.01, 100, n)
    v, _, _, _ = solve_s2_batch(target, cap, rho)
    np.testing.assert_allclose(v, oracle_s2_batch(target, cap, rho), atol=1e-8, rtol=0)
    for k in range(0, n, 50):
        sol = solve_s2(target[k], cap[k], rho[k])
        assert kkt_residual(target[k], cap[k], rho[k], sol) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 50))
def test_permutation_equivariance(T, seed, rho):
    rng = np.random.default_rng(seed)
    target, cap = rng.uniform(0, 3, T), rng.uniform(0, 2, T)
    perm = rng.permutation(T)
    a, b = solve_s2(target, cap, rho), solve_s2(target[perm], cap[perm], rho)
    assert b.v == pytest.approx(a.v, abs=1e-12) and b.xi0 == pytest.approx(a.xi0, abs=1e-12)
    np.testing.assert_allclose(b.load, a.load[perm], atol=1e-12)
    np.testing.assert_allclose(b.xi, a.xi[perm], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 50))
def test_level_monotone_in_target(T, seed, rho):
    rng = np.random.default_rng(seed)
    target, cap = rng.uniform(0, 3, T), rng.uniform(0, 2, T)
    bumped = target.copy()
    bumped[rng.integers(T)] += rng.uniform(0, 2)
    assert solve_s2(bumped, cap, rho).v >= solve_s2(target, cap, rho).v - 1e-12


def test_d2_examples():
    assert solve_d2(np.zeros(3), np.ones(3)) == 0
    assert solve_d2([0.2, -0.1], [1.0, 1.0]) is UNBOUNDED
    assert solve_d2([0.3, 0.4], [10.0, 20.0]) == pytest.approx(-11.0)
    rng = np.random.default_rng(1)
    assert d2_sampled_min([0.3, 0.4], [10.0, 20.0], rng, 10000) >= -11.0 - 1e-9


def test_d2_boundary_is_exact():
    lam = np.array([0.25, 0.25, 0.5])
    assert lam.sum() == 1.0
    assert solve_d2(lam, [1.0, 2.0, 3.0]) == pytest.approx(-(0.25 + 0.5 + 1.5))
    assert solve_d2(lam * (1 + 1e-9), [1.0, 2.0, 3.0]) is UNBOUNDED


def test_d2_unbounded_cases_have_descending_rays():
    for lam in ([-0.1, 0.2], [0.7, 0.6]):
        assert solve_d2(lam, [1.0, 1.0]) is UNBOUNDED
        assert d2_ray_value(lam, [1.0, 1.0], 1e6) < d2_ray_value(lam, [1.0, 1.0], 1e3) < 0


def test_d2_batch_agrees_with_scalar():
    rng = np.random.default_rng(2)
    lam = rng.dirichlet(np.ones(5), 40) * rng.uniform(0.5, 1.5, (40, 1))
    cap = rng.uniform(0, 3, (40, 5))
    vals, finite = solve_d2_batch(lam, cap)
    for k in range(40):
        ref = solve_d2(lam[k], cap[k])
        assert (ref is UNBOUNDED) == (not finite[k])
        assert ref is UNBOUNDED or ref == vals[k]
        assert finite[k] == (d2_case(lam[k]) == 3)


def test_sentinel_is_falsy_singleton():
    assert not UNBOUNDED and type(UNBOUNDED)() is UNBOUNDED and repr(UNBOUNDED) == "UNBOUNDED"
