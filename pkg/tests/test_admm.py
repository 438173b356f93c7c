import math
import numpy as np
import pytest

from evcoord.admm import (AdmmOptions, AdmmState, certificate, decentralized_response, init_state,
                          project_prices, residuals, run, step)
from evcoord.ev_solver import SolverOptions
from evcoord.model import (AWAY, EvProfile, FeederSeries, LocationMap, Scenario,
                           constraint_violation, project_feasible)
from evcoord.oracles import dense_admm_small, dense_weighted_norm, random_micro_scenario

EXACT = SolverOptions(tol=1e-12, max_iter=5000)


def fleet(profiles, gamma, cap):
    return Scenario(profiles, LocationMap(np.asarray(gamma), np.asarray(cap).shape[0]),
                    FeederSeries(np.asarray(cap, float)))


def ev(T, p_max=10.0, need=0.0, e_init=0.0, id="ev"):
    e_min = np.zeros(T)
    e_min[-1] = need
    return EvProfile(np.zeros(T), np.full(T, p_max), e_min, np.full(T, 100.0), e_init,
                     np.zeros(T), id=id)


def test_empty_fleet_state():
    sc = fleet([], np.zeros((0, 3), dtype=int), np.ones((2, 3)))
    state = init_state(sc, AdmmOptions())
    assert state.p.shape == (0, 3)
    np.testing.assert_array_equal(state.l, 0)


def test_init_without_need_is_zero():
    sc = fleet([ev(4)], np.zeros((1, 4), dtype=int), np.ones((1, 4)))
    np.testing.assert_array_equal(init_state(sc, AdmmOptions()).p, 0)


def test_init_is_back_loaded():
    sc = fleet([ev(8, p_max=1.0, need=5.0)], np.zeros((1, 8), dtype=int), np.ones((1, 8)))
    np.testing.assert_array_equal(init_state(sc, AdmmOptions()).p, [[0, 0, 0, 1, 1, 1, 1, 1]])


def test_one_slot_toy_reaches_zero_grid_cost():
    sc = fleet([ev(1, need=3.0)], [[0]], [[1.0]])
    opts = AdmmOptions(rho=10.0, s1_opts=EXACT, d1_opts=EXACT, gap_tol=1e-9)
    state, sol = run(sc, opts)
    assert sol.certificate.primal == pytest.approx(0.5 * opts.kappa_for(sc) * 9.0)
    np.testing.assert_allclose(state.p, project_feasible(np.zeros(1), sc.bounds.take(0))[None])
    assert sol.metrics.total_max_violation == 0
    assert sol.certificate.rel_gap <= 1e-6


def test_fixed_point_is_kept():
    # a pinned profile and an idle EV under spare capacity: zero price, consensus load
    pinned = EvProfile(np.ones(3), np.ones(3), np.zeros(3), np.full(3, 9.0), 0.0, np.zeros(3), id="a")
    sc = fleet([pinned, ev(3, id="b")], np.zeros((2, 3), dtype=int), np.ones((1, 3)))
    opts = AdmmOptions(rho=5.0, s1_opts=EXACT)
    p = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    hat_l = sc.aggregate(p)
    state = AdmmState(p, hat_l.copy(), np.zeros((1, 3)), hat_l)
    again = step(state, sc, opts)
    np.testing.assert_allclose(again.p, state.p, atol=1e-9)
    np.testing.assert_allclose(again.mu, state.mu, atol=1e-9)
    np.testing.assert_allclose(again.l, state.l, atol=1e-9)
    rep = residuals(again, state, sc, opts)
    assert rep.primal_norm == 0 and rep.dual_norm == 0


def test_identical_colocated_evs_stay_identical():
    T = 6
    sc = fleet([ev(T, need=20.0, id="a"), ev(T, need=20.0, id="b")],
               np.zeros((2, T), dtype=int), np.full((1, T), 0.004))
    opts = AdmmOptions(rho=50.0)
    state = init_state(sc, opts)
    for _ in range(15):
        state = step(state, sc, opts)
        np.testing.assert_array_equal(state.p[0], state.p[1])


def test_residual_norms_match_dense_definition():
    rng = np.random.default_rng(4)
    sc = random_micro_scenario(rng)
    opts = AdmmOptions(rho=7.0)
    prev = init_state(sc, opts)
    state = step(step(prev, sc, opts), sc, opts)
    prev = step(prev, sc, opts)
    rep = residuals(state, prev, sc, opts)
    gap = (state.l - state.hat_l) / sc.n_evs
    assert rep.primal_norm == pytest.approx(dense_weighted_norm(sc, gap), rel=1e-12)
    root_n = np.sqrt(sc.location.occupancy)
    assert np.linalg.norm(state.mu * root_n) == pytest.approx(dense_weighted_norm(sc, state.mu),
                                                              rel=1e-12, abs=1e-18)


def test_weighted_norm_with_unit_occupancy_is_frobenius():
    gamma = np.array([[0, 1], [1, 0]])
    sc = fleet([ev(2, id="a"), ev(2, id="b")], gamma, np.ones((2, 2)))
    M = np.array([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_array_equal(sc.location.occupancy, 1)
    assert dense_weighted_norm(sc, M) == pytest.approx(np.linalg.norm(M))


@pytest.mark.parametrize("seed", range(6))
def test_reduced_loop_matches_dense_admm(seed):
    rng = np.random.default_rng(100 + seed)
    sc = random_micro_scenario(rng)
    inner = SolverOptions(optimizer="pga", tol=-math.inf, max_iter=60, masking=False)
    opts = AdmmOptions(rho=float(rng.uniform(0.5, 50)), s1_opts=inner)
    dense = dense_admm_small(sc, opts, 30)
    state = init_state(sc, opts)
    for k in range(1, 31):
        state = step(state, sc, opts)
        it = dense.iterates[k]
        np.testing.assert_allclose(state.p, it.p, atol=1e-9, rtol=0)
        np.testing.assert_allclose(state.mu, it.mu[0], atol=1e-9, rtol=0)
        np.testing.assert_allclose(state.l / sc.n_evs, it.zbar, atol=1e-12, rtol=0)
        assert dense.consensus_spread(k) <= 1e-12
        assert it.sharing_error <= 1e-9


def test_dense_oracle_guards_size():
    gamma = np.zeros((5, 1), dtype=int)
    sc = fleet([ev(1, id=str(i)) for i in range(5)], gamma, np.ones((1, 1)))
    with pytest.raises(ValueError, match="I <= 4"):
        dense_admm_small(sc, AdmmOptions(), 1)


def test_negative_price_without_projection_is_unavailable():
    sc = fleet([ev(2, need=1.0)], np.zeros((1, 2), dtype=int), np.ones((1, 2)))
    opts = AdmmOptions(project_prices=False)
    state = init_state(sc, opts)
    state.mu[0, 0] = -0.01
    cert = certificate(state, sc, opts)
    assert cert.dual is None and cert.rel_gap is None and not cert.projected
    cert = certificate(state, sc, opts, project=True)
    assert cert.projected and cert.dual <= cert.primal


def test_price_projection():
    lam = project_prices(np.array([[-1.0, 0.5, 1.5], [0.1, 0.2, 0.3]]))
    np.testing.assert_allclose(lam[0], [0, 0.25, 0.75])
    np.testing.assert_array_equal(lam[1], [0.1, 0.2, 0.3])
    assert np.all(lam.sum(axis=1) <= 1.0)


def test_zero_demand_run_stops_after_one_iteration():
    T = 4
    sc = fleet([ev(T, id="a"), ev(T, id="b")], np.zeros((2, T), dtype=int), np.ones((1, T)))
    state, sol = run(sc, AdmmOptions())
    assert sol.iterations == 1 and sol.status == "gap"
    assert sol.certificate.primal == 0 and sol.certificate.rel_gap == 0


def test_max_iter_zero_reports_initial_state():
    sc = fleet([ev(3, need=2.0)], np.zeros((1, 3), dtype=int), np.ones((1, 3)))
    state, sol = run(sc, AdmmOptions(max_iter=0))
    assert sol.iterations == 0 and len(state.trace) == 1 and sol.status == "max_iter"


def _congested(seed=0, I=12, S=2, T=12):
    rng = np.random.default_rng(seed)
    gamma = rng.integers(0, S, (I, T))
    gamma[rng.random((I, T)) < 0.2] = AWAY
    profs = []
    for i in range(I):
        here = gamma[i] != AWAY
        e_min = np.zeros(T)
        e_min[-1] = 0.5 * 7.0 * here.sum()
        profs.append(EvProfile(np.zeros(T), np.where(here, 7.0, 0.0), e_min, np.full(T, 200.0),
                               0.0, np.zeros(T), id=f"E{i}"))
    return fleet(profs, gamma, rng.uniform(0.005, 0.02, (S, T)))


def test_iterates_feasible_and_weak_duality_holds():
    sc = _congested()
    seen = []
    opts = AdmmOptions(rho=30.0, max_iter=60, gap_tol=0.0, certificate_period=5)
    state, sol = run(sc, opts, callback=lambda st, rec: seen.append((st.p.copy(), rec)))
    for p, rec in seen:
        assert np.max(constraint_violation(p, sc.bounds)) <= 1e-9
        if rec["dual"] is not None:
            assert rec["dual"] <= rec["objective"] + 1e-8 * max(1.0, abs(rec["objective"]))


def test_relabeling_evs_and_feeders_is_symmetric():
    sc = _congested(seed=3)
    perm = np.random.default_rng(0).permutation(sc.n_evs)
    fperm = np.array([1, 0])
    inv = np.argsort(fperm)
    gamma = sc.location.gamma[perm]
    gamma = np.where(gamma == AWAY, AWAY, inv[np.maximum(gamma, 0)])
    other = fleet([sc.profiles[i] for i in perm], gamma, sc.capacity[fperm])
    opts = AdmmOptions(rho=30.0, max_iter=25, gap_tol=0.0)
    a, sa = run(sc, opts)
    b, sb = run(other, opts)
    np.testing.assert_allclose(b.p, a.p[perm], atol=1e-9)
    assert sb.certificate.primal == pytest.approx(sa.certificate.primal, rel=1e-9)
    assert sb.metrics.total_max_violation == pytest.approx(sa.metrics.total_max_violation, rel=1e-9)


def test_zero_price_response_is_minimal_effort():
    sc = _congested(seed=1)
    resp = decentralized_response(np.zeros_like(sc.capacity), sc, AdmmOptions(d1_opts=EXACT))
    for i in range(sc.n_evs):
        b = sc.bounds.take(i)
        # with no price the best response minimises ||p||^2 over the set
        assert np.sum(resp.profiles[i] ** 2) <= np.sum(project_feasible(np.zeros(sc.T), b) ** 2) + 1e-6


def test_expensive_slot_is_avoided():
    T = 4
    sc = fleet([ev(T, need=12.0)], np.zeros((1, T), dtype=int), np.ones((1, T)))
    lam = np.zeros((1, T))
    lam[0, 1] = 1e3
    resp = decentralized_response(lam, sc, AdmmOptions(d1_opts=EXACT))
    assert resp.profiles[0, 1] == pytest.approx(0.0, abs=1e-6)
    assert resp.profiles[0].sum() == pytest.approx(12.0, abs=1e-6)
    with pytest.raises(ValueError):
        decentralized_response(np.full((1, T), np.nan), sc, AdmmOptions())


def test_options_validation():
    with pytest.raises(ValueError):
        AdmmOptions(rho=0)
    with pytest.raises(ValueError):
        AdmmOptions(kappa=-1.0)
