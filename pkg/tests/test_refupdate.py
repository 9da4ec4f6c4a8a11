import math

import numpy as np
import pytest

from conftest import C_BAR, linear_spec
from tubedmpc.coupling import CouplingGraph, connectivity
from tubedmpc.errors import DimensionMismatch, InitializationError
from tubedmpc.ocp import TrajectoryWindow
from tubedmpc.refupdate import (
    check_consistency_coordinates,
    consistency_sets,
    coupled_condition_margins,
    initial_guess,
    reference_update,
    tentative_reference,
    validate_references,
)

N = 4


@pytest.fixture(scope="module")
def pair():
    specs = {1: linear_spec(1, [0.0, 0.0], [1.0, 0.0]), 2: linear_spec(2, [0.0, 1.0], [1.0, 1.0])}
    graph = CouplingGraph.build([1, 2], [connectivity(1, 2, 2.0)])
    return specs, graph


def still(point, k=0, count=N + 1):
    return np.tile(np.asarray(point, float), (count, 1))


def window(point, k=0):
    return TrajectoryWindow(k, still(point), np.zeros((N, 2)))


def sets_of(specs):
    return {i: s.consistency for i, s in specs.items()}


def test_consistency_sets_follow_margins():
    spec = linear_spec(1, [0.0, 0.0], [1.0, 0.0])
    cs = spec.consistency
    assert cs.radius == pytest.approx(math.sqrt(2) * C_BAR)
    np.testing.assert_allclose(cs.C_bar.halfwidths, [C_BAR, C_BAR])
    assert cs.eta == pytest.approx(cs.radius + np.linalg.norm(spec.tube.p_bar), rel=1e-6)


def test_consistency_box_must_fit_in_ball():
    spec = linear_spec(1, [0.0, 0.0], [1.0, 0.0])
    with pytest.raises(InitializationError) as info:
        consistency_sets(spec, c_bar=0.08)
    assert info.value.step == 5


def test_coupled_margin_uses_both_consistency_sets(pair):
    specs, graph = pair
    c = graph.constraints[0]
    own = still([0.0, 0.0], count=1)
    margin = coupled_condition_margins(c, 1, own, {2: [still([1.0, 0.0], count=1)]}, sets_of(specs))[0]
    nu = sum(s.consistency.radius + np.linalg.norm(s.tube.p_bar) for s in specs.values())
    assert margin == pytest.approx(1.0 - 2.0 + nu, rel=1e-6)


def test_always_policy_shifts_the_optimal_window(pair):
    specs, graph = pair
    optimal = TrajectoryWindow(3, np.arange(10, dtype=float).reshape(5, 2), np.zeros((N, 2)))
    prev = TrajectoryWindow(3, still([9.0, 9.0], count=N))
    upd = reference_update(specs[1], optimal, prev, {}, {}, sets_of(specs), graph, policy="always")
    assert upd.window.k == 4
    np.testing.assert_array_equal(upd.window.states, optimal.states[1:])
    assert upd.acceptance_rate == 1.0


def test_never_policy_keeps_previous_but_takes_last_entry(pair):
    specs, graph = pair
    optimal = TrajectoryWindow(0, np.arange(10, dtype=float).reshape(5, 2), np.zeros((N, 2)))
    prev = TrajectoryWindow(0, still([9.0, 9.0], count=N))
    upd = reference_update(specs[1], optimal, prev, {}, {}, sets_of(specs), graph, policy="never")
    np.testing.assert_array_equal(upd.window.states[:-1], prev.states[1:])
    np.testing.assert_array_equal(upd.window.states[-1], optimal.states[-1])


def test_conditional_update_rejects_states_too_far_from_neighbor(pair):
    specs, graph = pair
    own = TrajectoryWindow(0, np.array([[0.0, 0.0], [0.1, 0.0], [-0.9, 0.0], [0.2, 0.0], [0.3, 0.0]]),
                           np.zeros((N, 2)))
    prev = TrajectoryWindow(0, still([0.0, 0.0], count=N))
    neighbor = {2: window([1.0, 0.0])}
    upd = reference_update(specs[1], own, prev, neighbor, {2: TrajectoryWindow(0, still([1.0, 0.0], count=N))},
                           sets_of(specs), graph)
    np.testing.assert_array_equal(upd.accepted, [True, False, True])
    np.testing.assert_allclose(upd.window.states[1], [0.0, 0.0])
    np.testing.assert_allclose(upd.window.states[2], [0.2, 0.0])
    np.testing.assert_allclose(upd.window.states[3], [0.3, 0.0])


def test_neighbor_reference_also_checked(pair):
    specs, graph = pair
    own = window([0.0, 0.0])
    prev = TrajectoryWindow(0, still([0.0, 0.0], count=N))
    upd = reference_update(specs[1], own, prev, {2: window([1.0, 0.0])},
                           {2: TrajectoryWindow(0, still([1.9, 0.0], count=N))}, sets_of(specs), graph)
    assert not upd.accepted.any()


def test_reference_anchor_mismatch_raises(pair):
    specs, graph = pair
    with pytest.raises(DimensionMismatch):
        reference_update(specs[1], window([0.0, 0.0], k=2), TrajectoryWindow(1, still([0.0, 0.0], count=N)),
                         {}, {}, sets_of(specs), graph)


def test_tentative_reference_stays_at_current_time(pair):
    specs, graph = pair
    own = TrajectoryWindow(5, np.array([[0.0, 0.0], [-1.0, 0.0], [0.1, 0.0], [0.1, 0.0], [0.1, 0.0]]),
                           np.zeros((N, 2)))
    ref = TrajectoryWindow(5, still([0.0, 0.5], count=N))
    upd = tentative_reference(specs[1], own, ref, {2: window([1.0, 0.0], k=5)},
                              {2: TrajectoryWindow(5, still([1.0, 0.0], count=N))}, sets_of(specs), graph)
    assert upd.window.k == 5
    np.testing.assert_array_equal(upd.accepted, [True, False, True, True])
    np.testing.assert_allclose(upd.window.states[1], [0.0, 0.5])


def test_reference_validation(pair):
    specs, graph = pair
    near = {1: TrajectoryWindow(0, still([0.0, 0.0], count=N)), 2: TrajectoryWindow(0, still([1.0, 0.0], count=N))}
    report = validate_references(near, specs, graph, previous_optimal={i: window(w.states[0]) for i, w in near.items()})
    assert report.passed
    assert report.methods == {graph.constraints[0].label: "lipschitz"}
    assert report.consistency_margin == pytest.approx(-specs[1].consistency.radius)

    far = {1: near[1], 2: TrajectoryWindow(0, still([1.95, 0.0], count=N))}
    assert not validate_references(far, specs, graph).passed
    drifted = {1: window([0.2, 0.0]), 2: window([1.0, 0.0])}
    assert not validate_references(near, specs, graph, previous_optimal=drifted).passed


def test_coupled_constraints_must_use_consistency_coordinates(pair):
    specs, graph = pair
    check_consistency_coordinates(graph, specs)
    narrowed = {i: s.evolve(consistency_indices=(0,)) for i, s in specs.items()}
    with pytest.raises(InitializationError):
        check_consistency_coordinates(graph, narrowed)


@pytest.mark.parametrize("style, midpoint", [("clockwise", [2.0, 0.0]), ("counterclockwise", [-2.0, 0.0])])
def test_circular_guess_sweeps_around_center(style, midpoint):
    spec = linear_spec(1, [0.0, 2.0], [0.0, -2.0])
    guess = initial_guess(spec, 12, style, center=np.zeros(2))
    assert guess.is_consistent(spec.dyn)
    np.testing.assert_allclose(guess.states[6], midpoint, atol=1e-9)
    np.testing.assert_allclose(guess.states[-1], [0.0, -2.0], atol=1e-9)


def test_unknown_guess_style_raises():
    spec = linear_spec(1, [0.0, 0.0], [1.0, 0.0])
    with pytest.raises(InitializationError):
        initial_guess(spec, 4, "zigzag")
