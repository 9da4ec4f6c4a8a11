import json

import numpy as np
import pytest

from conftest import linear_pair
from tubedmpc import events, harness
from tubedmpc.agents import ControllerMode
from tubedmpc.errors import InitializationError, ScenarioError, TheoremViolation
from tubedmpc.harness import (
    compare,
    initialize,
    recompute_costs,
    simulate,
    summarize,
    write_comparison,
    write_results,
)
from tubedmpc.refupdate import ReferenceReport
from tubedmpc.scenarios import load_scenario, scenario_from_dict


@pytest.fixture(scope="module")
def pair_runs(pair_init):
    return simulate(pair_init, ControllerMode.proposed(), seed=3, runs=2, strict=True, record_events=False)


def test_initialization_produces_every_ingredient(pair_init):
    assert sorted(pair_init.specs) == [1, 2]
    assert pair_init.reference_report.passed
    assert set(pair_init.timings) == {"closure", "tube", "terminal", "initial trajectories", "consistency"}
    for i, spec in pair_init.specs.items():
        assert pair_init.terminal_reports[i].passed
        assert spec.terminal is not None
        assert spec.consistency.radius > 0
        assert pair_init.init[i].k == 0
        assert pair_init.init[i].is_consistent(spec.dyn)
        np.testing.assert_allclose(pair_init.init[i].states[0], spec.x0)
        np.testing.assert_allclose(pair_init.refs[i].states, pair_init.init[i].states[:-1])
        assert np.all(spec.tube.p_bar >= 0.039)
        assert np.all(spec.tube.p_bar < 0.045)


def test_initialization_files(pair_init, tmp_path):
    written = pair_init.write(tmp_path)
    assert [p.name for p in written] == ["pair_agent1.json", "pair_agent2.json", "pair_init.json"]
    with open(written[-1]) as f:
        summary = json.load(f)
    assert summary["agents"] == ["pair_agent1.json", "pair_agent2.json"]
    assert summary["reference_check"]["passed"] is True
    with open(written[0]) as f:
        agent = json.load(f)
    assert agent["x0"] == [0.0, 0.0]
    assert len(agent["initial_trajectory"]["states"]) == 6


def test_oversized_disturbance_fails_initialization():
    data = linear_pair()
    data["defaults"]["W"] = [2.5, 2.5]
    with pytest.raises(InitializationError):
        initialize(scenario_from_dict(data), certify_samples=50)


def test_runs_stay_feasible_and_inside_tubes(pair_runs):
    assert [m.run_id for m in pair_runs] == [0, 1]
    for m in pair_runs:
        assert m.steps == 6
        assert m.violations == []
        assert m.infeasible == 0
        assert max(m.max_distance) <= 2.0 + 1e-6
        assert m.nominal_distance[1][-1] < m.nominal_distance[1][0]
        assert m.trajectory.shape == (12, len(m.columns))
        assert m.bus["delivered"]["predicted"] == 12
        assert m.reference_checks == 6
        assert m.reference_failures == 0
    assert pair_runs[0].seed != pair_runs[1].seed


def test_references_checked_after_every_step(pair_init, monkeypatch):
    anchors = []
    check = harness.validate_references

    def counting(refs, *args, **kwargs):
        anchors.append(next(iter(refs.values())).k)
        return check(refs, *args, **kwargs)

    monkeypatch.setattr(harness, "validate_references", counting)
    [m] = simulate(pair_init, ControllerMode.proposed(), tsim=4, strict=True, record_events=False)
    assert anchors == [1, 2, 3, 4]
    assert m.reference_checks == 4
    assert m.reference_failures == 0


def test_failed_reference_check_is_a_violation_for_the_proposed_mode(pair_init, monkeypatch):
    def failing(refs, *args, **kwargs):
        report = ReferenceReport(next(iter(refs.values())).k)
        report.failures.append("connectivity[1, 2]: references violate the constraint by 0.1")
        return report

    monkeypatch.setattr(harness, "validate_references", failing)
    with pytest.raises(TheoremViolation) as info:
        simulate(pair_init, ControllerMode.proposed(), tsim=2, strict=True, record_events=False)
    assert info.value.kind == "reference_check"
    assert info.value.k == 0

    [m] = simulate(pair_init, ControllerMode.proposed(), tsim=2, record_events=False)
    assert sum(v["kind"] == "reference_check" for v in m.violations) == 2
    assert m.reference_failures == 2
    [base] = simulate(pair_init, ControllerMode.fixed_reference(), tsim=2, record_events=False)
    assert base.reference_failures == 2
    assert all(v["kind"] != "reference_check" for v in base.violations)


def test_runs_are_reproducible(pair_init, pair_runs):
    again = simulate(pair_init, ControllerMode.proposed(), seed=3, runs=2, workers=2, record_events=False)
    for first, second in zip(pair_runs, again):
        assert first.seed == second.seed
        np.testing.assert_allclose(first.trajectory, second.trajectory, atol=1e-8)


def test_persisted_trajectory_reproduces_costs(pair_init, pair_runs, tmp_path):
    written = write_results(tmp_path, "pair", "proposed", 3, pair_runs, {"runs": 2})
    assert written[-1].name == "pair_proposed_3_metrics.json"
    for m, path in zip(pair_runs, written[:-1]):
        costs = recompute_costs(path, pair_init.specs)
        for i in m.costs:
            assert costs[i] == pytest.approx(m.costs[i], rel=1e-9, abs=1e-12)
    with open(written[-1]) as f:
        data = json.load(f)
    assert data["summary"]["runs"] == 2
    assert data["settings"] == {"runs": 2}


def test_zero_length_run(pair_init, tmp_path):
    [m] = simulate(pair_init, ControllerMode.proposed(), tsim=0, record_events=False)
    assert m.costs == {1: 0.0, 2: 0.0}
    assert m.step_times == []
    assert m.trajectory.shape[0] == 0
    assert summarize([m])["min_distance"] is None
    write_results(tmp_path, "pair", "proposed", 0, [m])


def test_undisturbed_run_keeps_nominal_and_actual_together(pair_init):
    [m] = simulate(pair_init, ControllerMode.proposed(), disturbance_scale=0.0, strict=True, record_events=False)
    n = 2
    x = m.trajectory[:, 2:2 + n]
    x_hat = m.trajectory[:, 2 + n:2 + 2 * n]
    assert np.all(np.abs(x - x_hat) <= pair_init.specs[1].tube.p_bar + 1e-6)


def test_events_recorded_for_runs(pair_init):
    simulate(pair_init, ControllerMode.fixed_reference(), tsim=2)
    stats = events.get_run_stats("pair")
    assert stats["runs_started"] == 1
    assert stats["runs_finished"] == 1
    assert stats["modes"] == {"fixed-reference": 1}


def test_compare_normalizes_by_proposed(pair_init, tmp_path):
    comparison, batches = compare(pair_init, [ControllerMode.fixed_reference(), ControllerMode.proposed()],
                                  seed=1, tsim=3, record_events=False)
    assert comparison.baseline == "proposed"
    assert set(batches) == {"fixed-reference", "proposed"}
    assert comparison.ratio("proposed", 1) == pytest.approx(1.0)
    assert comparison.ratio("fixed-reference", 2) > 0
    csv_path, json_path = write_comparison(tmp_path, comparison, 1)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "mode,agent,mean_cost,ratio,mean_step_time"
    assert len(lines) == 5
    with pytest.raises(KeyError):
        comparison.ratio("sequential-direct", 1)


def test_invalid_batch_size(pair_init):
    with pytest.raises(ScenarioError):
        simulate(pair_init, ControllerMode.proposed(), runs=0)


@pytest.mark.slow
def test_bundled_connectivity_tube_size():
    init = initialize(load_scenario("connectivity"))
    for spec in init.specs.values():
        np.testing.assert_allclose(spec.tube.p_bar, [0.1157, 0.1157, 0.1169], rtol=0.02)


@pytest.mark.slow
@pytest.mark.parametrize("overrides", [{"xi11": 2.0}, {"xi11": 2.5}, {"xi11": 3.0, "cbar": 0.1}])
def test_bundled_connectivity_runs_stay_feasible_connected_and_settle(overrides):
    init = initialize(load_scenario("connectivity", overrides))
    tsim = init.scenario.tsim
    runs = simulate(init, ControllerMode.proposed(), seed=0, runs=20, workers=4, record_events=False)
    for run in runs:
        assert run.infeasible == 0
        assert max(run.max_distance) <= 2.9 + 1e-6
        assert run.reference_failures == 0
        for i in init.specs:
            assert run.settled_since[i] is not None
            assert run.settled_since[i] <= tsim - 20


@pytest.mark.slow
@pytest.mark.parametrize("xi11", [2.0, 2.5])
def test_fixed_reference_costs_at_least_five_percent_more(xi11):
    init = initialize(load_scenario("connectivity", {"xi11": xi11}))
    comparison, _ = compare(init, [ControllerMode.proposed(), ControllerMode.fixed_reference()],
                            seed=0, runs=20, workers=4, record_events=False)
    for i in (2, 3):
        assert comparison.ratio("fixed-reference", i) >= 1.05


@pytest.mark.slow
def test_parallel_step_beats_sequential_step_time():
    init = initialize(load_scenario("connectivity"))
    comparison, _ = compare(init, [ControllerMode.proposed(), ControllerMode.sequential(sorted(init.specs))],
                            seed=0, runs=1, record_events=False)
    assert comparison.step_time("proposed") <= comparison.step_time("sequential-direct") / 1.5


@pytest.mark.slow
def test_bundled_collision_run_keeps_robots_apart():
    init = initialize(load_scenario("collision"))
    [run] = simulate(init, ControllerMode.proposed(), runs=1, record_events=False)
    assert run.infeasible == 0
    assert min(run.min_distance) >= 0.5 - 1e-6
    assert run.reference_failures == 0


@pytest.mark.slow
def test_more_iterations_lower_the_collision_cost():
    init = initialize(load_scenario("collision"))
    totals = []
    for iterations in (1, 2, 4):
        runs = simulate(init, ControllerMode.proposed(iterations), seed=0, runs=5, workers=5, record_events=False)
        totals.append(float(np.mean([sum(m.costs.values()) for m in runs])))
    for before, after in zip(totals, totals[1:]):
        assert after <= 0.98 * before
