import numpy as np
import pytest

from tubedmpc.agents import ControllerMode, LatencyModel, MessageBus, RoundMessage, run_time_step
from tubedmpc.coupling import CouplingGraph, connectivity
from tubedmpc.errors import DeadlockError, ScenarioError, TubeDmpcError
from tubedmpc.ocp import FEAS_TOL, TrajectoryWindow
from tubedmpc.setgeom import contains


def triangle():
    return CouplingGraph.build([1, 2, 3], [connectivity(1, 2, 2.0), connectivity(1, 3, 2.0),
                                           connectivity(2, 3, 2.0)])


def payload(k, value):
    return TrajectoryWindow(k, np.full((3, 2), float(value)))


def test_mode_labels():
    assert ControllerMode.proposed().label == "proposed"
    assert ControllerMode.proposed(3).label == "proposed-it3"
    assert ControllerMode.fixed_reference().label == "fixed-reference"
    assert ControllerMode.sequential([2, 1]).label == "sequential-direct"


@pytest.mark.parametrize("kwargs", [
    {"kind": "jacobi"},
    {"kind": "proposed", "iterations": 0},
    {"kind": "fixedref", "iterations": 2},
])
def test_invalid_modes(kwargs):
    with pytest.raises(ScenarioError):
        ControllerMode(**kwargs)


def test_sequential_order_resolution():
    assert ControllerMode("sequential").resolved([2, 1, 3]).order == (1, 2, 3)
    assert ControllerMode.sequential([3, 1, 2]).resolved([1, 2, 3]).order == (3, 1, 2)
    with pytest.raises(ScenarioError):
        ControllerMode.sequential([1, 1, 2]).resolved([1, 2, 3])
    assert ControllerMode.proposed().resolved([1, 2]) == ControllerMode.proposed()


def test_bus_delivers_one_message_per_directed_edge():
    bus = MessageBus(triangle())
    for i in (1, 2, 3):
        bus.broadcast(i, 0, "predicted", 0, payload(0, i))
    inbox = bus.deliver(0, "predicted")
    assert sorted(inbox[1]) == [2, 3]
    assert inbox[3][2].states[0, 0] == 2.0
    assert bus.counters()["delivered"] == {"predicted": 6}
    assert bus.counters()["posted"] == {"predicted": 6}


def test_bus_barrier_detects_missing_message():
    bus = MessageBus(triangle())
    bus.broadcast(1, 0, "predicted", 0, payload(0, 1))
    bus.broadcast(2, 0, "predicted", 0, payload(0, 2))
    with pytest.raises(DeadlockError) as info:
        bus.deliver(0, "predicted")
    assert info.value.sender == 3
    assert info.value.round_key == (0, "predicted", 0)


def test_bus_rejects_duplicates_and_misanchored_payloads():
    bus = MessageBus(triangle())
    bus.post(RoundMessage(1, 2, 0, "reference", 0, payload(0, 1)))
    with pytest.raises(TubeDmpcError):
        bus.post(RoundMessage(1, 2, 0, "reference", 0, payload(0, 1)))
    with pytest.raises(TubeDmpcError):
        bus.post(RoundMessage(2, 1, 0, "reference", 0, payload(1, 2)))


def test_delivery_order_does_not_change_inboxes():
    inboxes = []
    for seed in (0, 1, 2):
        bus = MessageBus(triangle(), np.random.default_rng(seed))
        for i in (1, 2, 3):
            bus.broadcast(i, 4, "reference", 0, payload(4, i))
        inboxes.append({i: {j: w.states[0, 0] for j, w in box.items()} for i, box in bus.deliver(4, "reference").items()})
    assert inboxes[0] == inboxes[1] == inboxes[2]


def test_latency_only_accumulates_on_the_bus():
    bus = MessageBus(triangle(), latency=LatencyModel(0.01, 0.0))
    for i in (1, 2, 3):
        bus.broadcast(i, 0, "predicted", 0, payload(0, i))
    bus.deliver(0, "predicted")
    assert bus.latency_total == pytest.approx(0.01)


def step(pair_init, mode, seed=0):
    agents = pair_init.make_agents()
    states = {i: a.spec.x0 for i, a in agents.items()}
    bus = MessageBus(pair_init.graph, np.random.default_rng(seed))
    return agents, bus, run_time_step(agents, states, 0, mode.resolved(agents), bus, strict=True)


def test_proposed_step_updates_references(pair_init):
    agents, bus, result = step(pair_init, ControllerMode.proposed())
    assert result.violations == []
    for i, agent in agents.items():
        assert result.refs[i].k == 1
        assert result.refs[i].states.shape == (pair_init.scenario.horizon, 2)
        np.testing.assert_allclose(result.refs[i].states[-1], result.solutions[i].states[-1])
        assert contains(agent.spec.tube.U, result.inputs[i], tol=FEAS_TOL)
        assert agent.ref is result.refs[i]
        assert agent.optimal is result.solutions[i]
    assert bus.counters()["delivered"] == {"predicted": 2, "reference": 2}


def test_proposed_step_is_independent_of_delivery_order(pair_init):
    _, _, first = step(pair_init, ControllerMode.proposed(), seed=0)
    _, _, second = step(pair_init, ControllerMode.proposed(), seed=7)
    for i in first.solutions:
        np.testing.assert_allclose(first.solutions[i].states, second.solutions[i].states, atol=1e-9)
        np.testing.assert_allclose(first.refs[i].states, second.refs[i].states, atol=1e-9)


def test_iterations_add_exchange_rounds(pair_init):
    _, bus, result = step(pair_init, ControllerMode.proposed(2))
    assert result.violations == []
    assert bus.counters()["delivered"] == {"predicted": 4, "reference": 4}


def test_fixed_reference_takes_every_predicted_state(pair_init):
    _, _, result = step(pair_init, ControllerMode.fixed_reference())
    for i, window in result.solutions.items():
        np.testing.assert_allclose(result.refs[i].states, window.states[1:])


def test_sequential_step_skips_the_bus(pair_init):
    agents, bus, result = step(pair_init, ControllerMode("sequential"))
    assert bus.counters()["delivered"] == {}
    assert set(result.solutions) == {1, 2}
    assert result.step_time == pytest.approx(sum(result.agent_times.values()))
    for i, agent in agents.items():
        assert agent.stats.solves == 1
        assert agent.stats.recovered == 0
