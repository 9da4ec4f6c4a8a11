import math

import numpy as np
import pytest

from tubedmpc.coupling import (
    ConstraintSpec,
    CouplingGraph,
    check_tightened,
    collision,
    connectivity,
    constraint_from_dict,
    eval_constraint,
    sampled_violation,
    tightening_scalars,
)
from tubedmpc.errors import ScenarioError
from tubedmpc.setgeom import Ball, Box

P_ROBOT = Box.symmetric([0.1636 / math.sqrt(2), 0.1636 / math.sqrt(2), 0.1169])
C_HAT = Ball.origin(2, math.sqrt(2) * 0.125)


def test_connectivity_margins():
    c = connectivity(0, 1, 2.9)
    assert eval_constraint(c, {0: [0, 0, 0], 1: [2, 0, 0]})[0] == pytest.approx(-0.9)
    assert eval_constraint(c, {0: [0, 0, 0], 1: [2.9, 0, 1]})[0] == pytest.approx(0.0)


def test_collision_margin_is_violated():
    c = collision(0, 1, 0.5)
    assert eval_constraint(c, [[0, 0, 0], [0.3, 0, 0]])[0] == pytest.approx(0.2)


def test_missing_participant_raises():
    with pytest.raises(ScenarioError):
        eval_constraint(connectivity(0, 1, 2.9), {0: [0, 0, 0]})


def test_distance_tightening_matches_robot_numbers():
    c = connectivity(0, 1, 2.9)
    sets = {0: (C_HAT, P_ROBOT), 1: (C_HAT, P_ROBOT)}
    assert tightening_scalars(c, sets) == pytest.approx(0.68076, abs=1e-5)


def test_zero_sets_give_zero_tightening():
    c = connectivity(0, 1, 2.9)
    assert tightening_scalars(c, {0: Box.zeros(3), 1: Box.zeros(3)}) == 0.0


def test_single_agent_ball_tightening_is_radius():
    c = ConstraintSpec("custom", (0,), evaluator=lambda x: x[..., 0] - 1.0, lipschitz=1.0, indices=None)
    assert tightening_scalars(c, {0: Ball.origin(2, 0.3)}) == pytest.approx(0.3)


def test_euclidean_norm_option():
    c = ConstraintSpec("custom", (0, 1), evaluator=lambda a, b: a[..., 0] - b[..., 0], lipschitz=2.0,
                       indices=(0,), lipschitz_norm="euclidean")
    nu = tightening_scalars(c, {0: Box.symmetric([0.3]), 1: Box.symmetric([0.4])})
    assert nu == pytest.approx(2.0 * 0.5)


def test_affine_tightening_uses_support():
    c = ConstraintSpec("affine", (0, 1), A=[[1.0, 0.0, -1.0, 0.0]], b=[1.0])
    nu = tightening_scalars(c, {0: Box.symmetric([0.1, 0.2]), 1: Box.symmetric([0.3, 0.4])})
    np.testing.assert_allclose(nu, [0.4])


def test_check_tightened_examples():
    c = connectivity(0, 1, 2.9)
    assert check_tightened(c, {0: [0, 0, 0], 1: [2.0, 0, 0]}, 0.68076)
    assert not check_tightened(c, {0: [0, 0, 0], 1: [2.3, 0, 0]}, 0.68076)
    assert check_tightened(c, {0: [0, 0, 0], 1: [2.9, 0, 0]}, 0.0)


@pytest.mark.parametrize("distance", [1.0, 2.0, 2.2])
def test_surrogate_is_sound_on_samples(distance):
    c = connectivity(0, 1, 2.9)
    sets = {0: (Ball.origin(3, math.sqrt(2) * 0.125), P_ROBOT),
            1: (Ball.origin(3, math.sqrt(2) * 0.125), P_ROBOT)}
    centers = {0: np.zeros(3), 1: np.array([distance, 0.0, 0.0])}
    nu = tightening_scalars(c, sets)
    if check_tightened(c, centers, nu):
        worst = sampled_violation(c, centers, sets, np.random.default_rng(5), count=1000)
        assert worst <= 0.0


def test_graph_mirrors_declarations():
    c01 = connectivity(0, 1, 2.9)
    graph = CouplingGraph.from_agent_lists([0, 1, 2], {0: [c01], 2: [connectivity(1, 2, 2.9)]})
    assert graph.neighbors(0) == [1]
    assert graph.neighbors(1) == [0, 2]
    assert c01 in graph.constraints_of(1)
    assert len(graph.constraints) == 2


def test_duplicate_declarations_are_merged():
    graph = CouplingGraph.build([0, 1], [connectivity(0, 1, 2.9), connectivity(0, 1, 2.9)])
    assert len(graph.constraints) == 1
    assert graph.max_degree == 1


def test_complete_graph_and_local_constraints():
    cons = [connectivity(i, j, 2.9) for i, j in ((0, 1), (0, 2), (1, 2))]
    local = ConstraintSpec("affine", (0,), A=[[1.0, 0.0, 0.0]], b=[5.0])
    graph = CouplingGraph.build([0, 1, 2], cons + [local])
    assert sum(len(graph.neighbors(i)) for i in graph.agents) == 6
    assert graph.local_of(0) == [local]
    assert len(graph.coupled_of(0)) == 2


def test_invalid_constraints_are_rejected():
    with pytest.raises(ScenarioError):
        ConstraintSpec("connectivity", (0, 1), d_max=-1.0)
    with pytest.raises(ScenarioError):
        ConstraintSpec("collision", (0, 1), d_min=0.5, lipschitz=2.0)
    with pytest.raises(ScenarioError):
        CouplingGraph.build([0], [connectivity(0, 1, 2.9)])
    with pytest.raises(ScenarioError):
        CouplingGraph.from_agent_lists([0, 1, 2], {2: [connectivity(0, 1, 2.9)]})


def test_graph_rejects_inconsistent_topology():
    c = connectivity(1, 2, 2.0)
    edge = frozenset({frozenset((1, 2))})
    graph = CouplingGraph((1, 2), (c,), edge)
    assert graph.neighbors(1) == [2]
    # coupled agents that are not neighbors
    with pytest.raises(ScenarioError, match="not neighbors"):
        CouplingGraph((1, 2), (c,), frozenset())
    # an edge without a constraint behind it
    with pytest.raises(ScenarioError, match="no coupled constraint"):
        CouplingGraph((1, 2, 3), (c,), edge | {frozenset((2, 3))})
    with pytest.raises(ScenarioError, match="unknown agent"):
        CouplingGraph((1,), (c,), frozenset())
    with pytest.raises(ScenarioError):
        CouplingGraph((1, 2), (c,), edge | {frozenset((1, 4))})


def test_constraint_from_dict():
    c = constraint_from_dict({"kind": "collision", "participants": [1, 3], "d_min": 0.5})
    assert c.participants == (1, 3) and c.indices == (0, 1)
    assert c.to_dict()["d_min"] == 0.5
