import math

import numpy as np
import pytest

from tubedmpc.errors import InitializationError, RpiError
from tubedmpc.model import LinearLTI, OmniRobot, SubsystemDynamics, closed_loop_step
from tubedmpc.setgeom import Box, EmptySet, HPolytope, contains, is_zero, sample, vertices
from tubedmpc.tube import (
    AuxiliaryLaw,
    build_tube,
    check_rpi_montecarlo,
    compute_delta_u,
    compute_rpi,
    rpi_outer_approximation,
    tighten_state,
)

LAM = np.diag([-6.0, -6.0, -5.5])
LAM_D = np.diag([math.exp(-2), math.exp(-2), math.exp(-11 / 6)])
W_D = Box.symmetric([0.1, 0.1, math.pi / 32])
W = Box.symmetric([0.6940, 0.6940, 0.6429])
U = Box.symmetric([15.0, 15.0, 15.0])


@pytest.fixture(scope="module")
def robot_tube():
    return build_tube(OmniRobot(0.2, 1.0), LAM, W, U, dt=1 / 3)


def test_scalar_rpi_matches_geometric_series():
    P = compute_rpi([[0.5]], Box.symmetric([0.3]))
    assert P.upper[0] >= 0.6 - 1e-12
    assert P.upper[0] == pytest.approx(0.6, rel=0.05)


def test_zero_disturbance_gives_zero_rpi():
    assert is_zero(compute_rpi(LAM_D, Box.zeros(3)))


def test_robot_rpi_box():
    P, terms, alpha = rpi_outer_approximation(LAM_D, W_D)
    assert isinstance(P, Box)
    np.testing.assert_allclose(P.halfwidths, [0.1157, 0.1157, 0.1169], rtol=0.02)
    assert alpha <= 0.01 and terms >= 1


def test_rpi_requires_schur_matrix():
    with pytest.raises(RpiError):
        compute_rpi([[1.2]], Box.symmetric([0.1]))


def test_rpi_inclusion_on_samples():
    rng = np.random.default_rng(1)
    P = compute_rpi(LAM_D, W_D)
    pts = sample(P, rng, 1000) @ LAM_D.T + sample(W_D, rng, 1000)
    assert np.all(contains(P, pts, tol=1e-9))


def test_rpi_for_polytopic_disturbance():
    W_poly = HPolytope([[1, 1], [-1, 1], [1, -1], [-1, -1]], [0.1, 0.1, 0.1, 0.1])
    lam_d = np.array([[0.5, 0.2], [0.0, 0.6]])
    P = compute_rpi(lam_d, W_poly)
    rng = np.random.default_rng(4)
    pts = sample(P, rng, 500) @ lam_d.T + sample(W_poly, rng, 500)
    assert np.all(contains(P, pts, tol=1e-9))


def test_montecarlo_rpi_containment(robot_tube):
    report = check_rpi_montecarlo(robot_tube, steps=2_000, seed=2)
    assert report["exits"] == 0


@pytest.mark.slow
def test_montecarlo_rpi_containment_long(robot_tube):
    report = check_rpi_montecarlo(robot_tube, steps=100_000, seed=3)
    assert report["exits"] == 0


def test_zero_disturbance_contracts_from_vertex():
    P = compute_rpi(LAM_D, W_D)
    p = vertices(P)[0]
    norms = []
    for _ in range(5):
        p = LAM_D @ p
        norms.append(np.linalg.norm(p))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_deadbeat_error_lands_in_disturbance_set():
    tube = build_tube(LinearLTI(np.zeros((2, 2)), np.eye(2), discrete=True), np.zeros((2, 2)),
                      Box.symmetric([0.1, 0.2]), Box.symmetric([5.0, 5.0]), dt=1.0)
    report = check_rpi_montecarlo(tube, steps=50, seed=0)
    assert report["exits"] == 0
    np.testing.assert_allclose(tube.P.halfwidths, [0.1, 0.2])


def test_delta_u_examples():
    robot = OmniRobot(0.2, 1.0)
    assert is_zero(compute_delta_u(LAM, Box.zeros(3), robot, U))
    P = Box.symmetric([0.1157, 0.1157, 0.1169])
    from tubedmpc.setgeom import linear_map, rotation_union_outer_box

    Q = rotation_union_outer_box(linear_map(LAM, P))
    assert Q.halfwidths[0] == pytest.approx(0.9817, abs=1e-4)
    plain = compute_delta_u(LAM, P, robot, include_mismatch=False)
    np.testing.assert_allclose(plain.halfwidths, np.abs(robot.B.T) @ Q.halfwidths)


def test_tightened_robot_input_set_nonempty(robot_tube):
    assert not isinstance(robot_tube.U_hat, EmptySet)
    assert np.all(robot_tube.U_hat.halfwidths > 0)


def test_tighten_state_examples():
    out = tighten_state(Box.symmetric([1, 1]), Box.symmetric([0.1, 0.1]))
    np.testing.assert_allclose(out.upper, [0.9, 0.9])
    assert isinstance(tighten_state(Box.symmetric([0.1]), Box.symmetric([1.0])), EmptySet)
    half = HPolytope([[1.0, 0.0, 0.0]], [5.0])
    out = tighten_state(half, Box.symmetric([0.1157, 0.1157, 0.1169]))
    assert out.b[0] == pytest.approx(5 - 0.1157)


def test_larger_error_set_never_enlarges_tightened_set():
    X = Box.symmetric([1.0, 2.0])
    small = tighten_state(X, Box.symmetric([0.1, 0.1]))
    large = tighten_state(X, Box.symmetric([0.2, 0.3]))
    pts = sample(large, np.random.default_rng(0), 500)
    assert np.all(contains(small, pts))


def test_error_follows_linear_dynamics(robot_tube):
    dyn = SubsystemDynamics(OmniRobot(0.2, 1.0), dt=1 / 3, substeps=20)
    x_hat, u_hat = np.array([0.0, 0.0, 0.4]), np.array([3.0, -2.0, 1.0])
    p0 = np.array([0.1, -0.05, 0.08])
    step = closed_loop_step(dyn, x_hat + p0, x_hat, u_hat, robot_tube.aux)
    np.testing.assert_allclose(step.x - step.x_hat, robot_tube.lam_d @ p0, atol=1e-6)


def test_actual_inputs_stay_in_input_set(robot_tube):
    rng = np.random.default_rng(7)
    aux = robot_tube.aux
    for p in vertices(robot_tube.P):
        for u_hat in vertices(robot_tube.U_hat)[:4]:
            x_hat = np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi)])
            u = u_hat + aux(x_hat + p, x_hat, u_hat)
            assert contains(U, u, tol=1e-9)


def test_zero_error_gives_zero_feedback(robot_tube):
    x = np.array([1.0, 2.0, 0.3])
    u_hat = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(robot_tube.aux(x, x, u_hat), 0.0, atol=1e-12)


def test_oversized_disturbance_fails_initialization():
    with pytest.raises(InitializationError) as info:
        build_tube(OmniRobot(0.2, 1.0), LAM, Box.symmetric([69.4, 69.4, 64.29]), U, dt=1 / 3)
    assert info.value.step == 2


def test_linear_auxiliary_gain():
    model = LinearLTI([[1.0, 1.0], [0.0, 1.0]], [[0.0], [1.0]], discrete=True)
    aux = AuxiliaryLaw(model, np.array([[1.0, 1.0], [-0.5, 0.2]]))
    np.testing.assert_allclose(aux.gain, [[-0.5, -0.8]])
