import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcoord.model import (AWAY, EvProfile, FeederSeries, LocationMap, Scenario, ScenarioError,
                           aggregate_load, bounds_from_band, check_necessary, constraint_violation,
                           derive_bounds, ev_cost, feeder_violation, grid_cost, is_feasible,
                           nonempty, project_feasible, project_feasible_batch)
from evcoord.oracles import (brute_force_nonempty, dense_aggregate,
                             labeled_feasibility_instances)


def profile(p_min, p_max, e_min, e_max, e_init=0.0, demand=None, id="x"):
    T = len(p_min)
    return EvProfile(p_min, p_max, e_min, e_max, e_init,
                     np.zeros(T) if demand is None else demand, id=id)


@pytest.fixture
def hidden_t3():
    return bounds_from_band([0, 0, 0], [1, 1, 1], [0, 0, 3], [0, 0.5, 3])


def test_single_slot_bounds():
    b = derive_bounds(profile([0], [5], [0], [5]))
    for name, want in [("s_min", 0), ("s_max", 5), ("c_min", 0), ("c_max", 5),
                       ("b_min", 0), ("b_max", 5)]:
        assert getattr(b, name).tolist() == [want]


def test_three_slot_envelopes_from_energy_bounds(hidden_t3):
    b = derive_bounds(profile([0] * 3, [1] * 3, [0, 0, 3], [0, 0.5, 3]))
    np.testing.assert_array_equal(b.b_min, [1, 2, 3])
    np.testing.assert_array_equal(b.b_max, [0, 0.5, 3])
    np.testing.assert_array_equal(b.b_min, hidden_t3.b_min)


def test_envelopes_match_scan_over_later_slots():
    rng = np.random.default_rng(3)
    for _ in range(50):
        T = int(rng.integers(1, 10))
        p_min = rng.uniform(-1, 1, T)
        p_max = p_min + rng.uniform(0, 3, T)
        s = np.sort(rng.uniform(-5, 5, (2, T)), axis=0)
        b = bounds_from_band(p_min, p_max, s[0], s[1])
        for t in range(T):
            assert b.b_min[t] == pytest.approx(b.c_max[t] + max(s[0][t:] - b.c_max[t:]))
            assert b.b_max[t] == pytest.approx(b.c_min[t] + min(s[1][t:] - b.c_min[t:]))


def test_total_box_energy_is_last_prefix():
    b = derive_bounds(profile([0, 1, 2], [3, 4, 5], [0] * 3, [100] * 3))
    assert b.c_max[-1] == 12


def test_necessary_examples(hidden_t3):
    assert check_necessary(bounds_from_band([0], [5], [0], [5]))
    assert not check_necessary(bounds_from_band([0], [1], [2], [3]))
    assert check_necessary(hidden_t3)


def test_feasibility_examples(hidden_t3):
    assert is_feasible(bounds_from_band([0], [5], [0], [5]))
    assert not is_feasible(hidden_t3)
    assert project_feasible(np.zeros(3), hidden_t3) is None


def test_necessary_accepts_energy_above_minimum():
    # initial energy above the floor makes the raw band dip below the box
    b = derive_bounds(profile([0, 0], [5, 5], [10, 10], [60, 60], e_init=30.0))
    assert check_necessary(b) and nonempty(b)


def test_projection_hand_trace():
    b = bounds_from_band([0, 0], [2, 2], [0, 3], [2, 4])
    np.testing.assert_array_equal(b.b_min, [1, 3])
    np.testing.assert_array_equal(b.b_max, [2, 4])
    np.testing.assert_array_equal(project_feasible(np.zeros(2), b), [1, 2])


def test_projection_keeps_feasible_target_verbatim():
    b = bounds_from_band([0] * 3, [2] * 3, [0, 1, 2], [2, 3, 4])
    target = np.array([0.3, 1.1, 0.7])
    out = project_feasible(target, b)
    assert out is not None and np.array_equal(out, target)


def test_labeled_instances_and_projection():
    for inst in labeled_feasibility_instances(5, 600):
        verdict = bool(check_necessary(inst.bounds)) and bool(is_feasible(inst.bounds))
        assert verdict == inst.feasible, inst.family
        out = project_feasible(np.zeros(inst.bounds.T), inst.bounds)
        assert (out is not None) == inst.feasible
        if out is not None:
            assert constraint_violation(out, inst.bounds) <= 1e-9


@st.composite
def integer_bounds(draw):
    T = draw(st.integers(1, 4))
    p_min = np.array(draw(st.lists(st.integers(-1, 1), min_size=T, max_size=T)), float)
    width = np.array(draw(st.lists(st.integers(0, 2), min_size=T, max_size=T)), float)
    lo = np.array(draw(st.lists(st.integers(-3, 4), min_size=T, max_size=T)), float)
    gap = np.array(draw(st.lists(st.integers(-1, 3), min_size=T, max_size=T)), float)
    return bounds_from_band(p_min, p_min + width, lo, lo + gap)


@settings(max_examples=400, deadline=None)
@given(integer_bounds())
def test_feasibility_matches_lattice_enumeration(b):
    assert bool(nonempty(b)) == brute_force_nonempty(b)


@settings(max_examples=200, deadline=None)
@given(integer_bounds(), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_projection_idempotent_and_feasible(b, raw):
    target = np.array(raw[: b.T])
    once = project_feasible(target, b)
    if not nonempty(b):
        assert once is None
        return
    assert constraint_violation(once, b) <= 1e-9
    assert np.array_equal(project_feasible(once, b), once)


def test_batch_projection_marks_empty_rows(hidden_t3):
    ok_b = bounds_from_band([0, 0, 0], [1, 1, 1], [0, 0, 1], [3, 3, 3])
    stack = type(ok_b)(*(np.stack([getattr(ok_b, f), getattr(hidden_t3, f)])
                         for f in ok_b.__dataclass_fields__))
    p, ok = project_feasible_batch(np.zeros((2, 3)), stack)
    assert ok.tolist() == [True, False]
    assert np.isnan(p[1]).all() and constraint_violation(p[0], ok_b) == 0


def test_ev_cost_examples():
    assert ev_cost(np.zeros(3), 1.0) == 0
    assert ev_cost(np.array([3.0, 4.0]), 2.0) == 25
    assert ev_cost(np.array([3.0, 4.0]), 0.0) == 0


def test_violation_examples():
    assert feeder_violation(np.array([1.0, 1.0]), np.array([2.0, 3.0])) == 0
    assert feeder_violation(np.array([3.0, 2.0]), np.array([1.0, 1.0])) == 2
    assert feeder_violation(np.array([-1.0, 0.5]), np.zeros(2)) == 0.5


def test_grid_cost_examples():
    caps = np.ones((2, 2))
    assert grid_cost(np.zeros((2, 2)), caps) == 0
    assert grid_cost(np.array([[3.0, 2.0], [1.0, 1.5]]), caps) == 2.5
    assert grid_cost(np.array([[3.0, 2.0], [0.0, 4.0]]), np.zeros((2, 2))) == 7


def test_aggregate_single_ev_and_colocated_pair():
    loc = LocationMap(np.zeros((1, 3), dtype=int), 2)
    agg = aggregate_load(np.array([[1.0, 2.0, 3.0]]), loc)
    np.testing.assert_allclose(agg, [[1e-3, 2e-3, 3e-3], [0, 0, 0]])
    loc2 = LocationMap(np.array([[0, AWAY], [0, 1]]), 2)
    agg2 = aggregate_load(np.ones((2, 2)), loc2)
    assert agg2[0, 0] == pytest.approx(0.002) and agg2[1, 1] == pytest.approx(0.001)
    assert agg2[0, 1] == 0


def _random_scenario(rng, I=5, S=2, T=4):
    gamma = rng.integers(0, S, (I, T))
    gamma[rng.random((I, T)) < 0.25] = AWAY
    profs = [EvProfile(np.zeros(T), np.where(gamma[i] != AWAY, 7.0, 0.0), np.zeros(T),
                       np.full(T, 50.0), 10.0, np.zeros(T), id=str(i)) for i in range(I)]
    return Scenario(profs, LocationMap(gamma, S), FeederSeries(np.ones((S, T))))


def test_aggregate_matches_dense_tensors_and_is_linear():
    rng = np.random.default_rng(8)
    sc = _random_scenario(rng)
    p, q = rng.uniform(0, 7, (2, 5, 4))
    np.testing.assert_allclose(sc.aggregate(p), dense_aggregate(sc, p), rtol=1e-12)
    combo = sc.aggregate(2.5 * p - 0.5 * q)
    np.testing.assert_allclose(combo, 2.5 * sc.aggregate(p) - 0.5 * sc.aggregate(q),
                               rtol=1e-12, atol=1e-15)


def test_scenario_rejects_charging_while_away():
    gamma = np.array([[0, AWAY]])
    prof = EvProfile(np.zeros(2), np.full(2, 5.0), np.zeros(2), np.full(2, 9.0), 0.0, np.zeros(2))
    with pytest.raises(ScenarioError, match="AWAY"):
        Scenario([prof], LocationMap(gamma, 1), FeederSeries(np.ones((1, 2))))


def test_profile_length_mismatch_is_structural_error():
    with pytest.raises(ValueError):
        EvProfile(np.zeros(2), np.ones(3), np.zeros(2), np.ones(2), 0.0, np.zeros(2))
