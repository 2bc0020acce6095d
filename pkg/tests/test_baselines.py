import inspect
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glclab.baselines import (STANLEY_GAIN, MpcConfig, MpcController, PidGains, PidState,
                              build_mpc_qp, linearize_model, pid_throttle, reference_horizon,
                              stanley_law, stanley_steer)
from glclab.gvm import euler_bicycle_step, pretraining_track
from glclab.plant import ControlInput, PlantParams, PlantState, observe, plant_step
from glclab.qp import QpProblem, kkt_residual, qp_solve
from oracles import brute_force_qp, random_qp

P = PlantParams()


# ----------------------------------------------------------------------- PID

def test_pid_at_reference_is_zero():
    assert pid_throttle(10.0, 10.0, PidState()) == 0.0


def test_pid_saturates():
    assert pid_throttle(10.0, 0.0, PidState()) == 1.0
    assert pid_throttle(0.0, 10.0, PidState()) == 0.0


def test_pid_integral_clamp():
    st_ = PidState()
    for _ in range(500):
        pid_throttle(10.0, 0.0, st_)
    assert st_.integral == PidGains().integral_limit
    for _ in range(500):
        pid_throttle(0.0, 10.0, st_)
    assert st_.integral == -PidGains().integral_limit


def pid_speeds(steps=250, creep=True):
    s, pid = PlantState(), PidState()
    speeds = []
    for _ in range(steps):
        T = pid_throttle(10.0, observe(s)[3], pid)
        s = plant_step(s, ControlInput(0.0, T), P, creep=creep)
        speeds.append(observe(s)[3])
    return np.array(speeds)


def test_pid_step_response_on_plant():
    # creep exceeds drag at 10 m/s and there is no brake, so v drifts up once T hits 0
    settled = pid_speeds()[149:]  # from t = 15 s on
    assert np.all(np.abs(settled - 10.0) <= 0.5)


def test_pid_step_response_reaches_band():
    speeds = pid_speeds(150)
    assert np.any(np.abs(speeds - 10.0) <= 0.5)


def test_pid_step_response_settles_without_creep():
    settled = pid_speeds(creep=False)[149:]
    assert np.all(np.abs(settled - 10.0) <= 0.5)


# ------------------------------------------------------------------- Stanley

def test_stanley_default_gain_pinned():
    assert STANLEY_GAIN == 1.0
    assert inspect.signature(stanley_law).parameters["k"].default == 1.0
    assert inspect.signature(stanley_steer).parameters["k"].default == 1.0


def test_stanley_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        psi, e, v, k = rng.uniform(-0.5, 0.5), rng.uniform(-3, 3), rng.uniform(0.5, 30), rng.uniform(0.1, 3)
        assert stanley_law(psi, e, v, k) == psi + math.atan(k * e / v)


def test_stanley_examples():
    assert stanley_law(0.0, 0.0, 5.0) == 0.0
    assert stanley_law(0.0, 4.0, 4.0) == pytest.approx(math.pi / 4, abs=1e-15)
    assert abs(stanley_law(0.0, 1.0, 10.0)) < abs(stanley_law(0.0, 1.0, 5.0))


def test_stanley_on_path_equilibrium():
    path = pretraining_track()
    delta, _ = stanley_steer([50.0, 0.0, 0.0, 10.0], path, P)
    assert delta == 0.0


def test_stanley_steers_back():
    path = pretraining_track()
    assert stanley_steer([50.0, 0.5, 0.0, 10.0], path, P)[0] < 0  # left of path -> right
    assert stanley_steer([50.0, -0.5, 0.0, 10.0], path, P)[0] > 0
    # error taken at the front axle: heading toward the path reduces it
    left = stanley_steer([50.0, 0.5, -0.2, 10.0], path, P)[0]
    assert left > stanley_steer([50.0, 0.5, 0.0, 10.0], path, P)[0]


def test_stanley_clamped():
    assert stanley_steer([50.0, 40.0, 1.2, 0.0], pretraining_track(), P)[0] == -1.0


# -------------------------------------------------------------- linearisation

def test_linearize_small_angle_row():
    A, B, c = linearize_model([0.0, 0.0, 0.0, 8.0], 0.0, 0.2, P, 0.1)
    assert A[1, 2] == pytest.approx(0.1 * 8.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.5, 20), st.floats(-0.8, 0.8), st.floats(0, 1))
def test_linearize_affine_and_jacobian(theta, v, delta, T):
    X = np.array([3.0, -2.0, theta, v])
    A, B, c = linearize_model(X, delta, T, P, 0.1)
    step = euler_bicycle_step(X, delta, T, P, 0.1)
    np.testing.assert_allclose(A @ X + B[:, 0] * delta + c, step, rtol=0, atol=1e-12)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (euler_bicycle_step(X + e, delta, T, P, 0.1) - euler_bicycle_step(X - e, delta, T, P, 0.1)) / (2 * h)
        np.testing.assert_allclose(A[:, i], fd, atol=1e-6)
    fd = (euler_bicycle_step(X, delta + h, T, P, 0.1) - euler_bicycle_step(X, delta - h, T, P, 0.1)) / (2 * h)
    np.testing.assert_allclose(B[:, 0], fd, atol=1e-6)


# ------------------------------------------------------------------------ QP

def test_qp_unconstrained_and_clipped():
    r = qp_solve(QpProblem(np.eye(2), [-1.0, -1.0], -10, 10))
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-9)
    r = qp_solve(QpProblem(np.eye(2), [-5.0, -5.0], -1, 1))
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-9)
    assert r.converged and np.all(r.y[:2] > 0)


def test_qp_errors():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), [0, 0], -1, 1)
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0, 0], 1, -1)
    with pytest.raises(ValueError):
        QpProblem(np.eye(3), [0, 0], -1, 1)


def test_qp_iteration_cap_flags():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(12, 12))
    qp = QpProblem(M @ M.T + 1e-3 * np.eye(12), rng.normal(size=12) * 10, -1, 1, -0.05, 0.05)
    for cap in (3, 50):
        r = qp_solve(qp, max_iter=cap)
        assert not r.converged and r.iterations <= cap
        assert np.all(np.abs(r.x) <= 1.0) and np.all(np.abs(np.diff(r.x)) <= 0.05 + 1e-12)
    r = qp_solve(qp, tol=0.0, max_iter=500)
    assert not r.converged and r.iterations <= 500


def test_mpc_unconverged_step_holds_previous_steer():
    ctrl = MpcController(P, MpcConfig(tol=0.0, max_iter=200))
    delta, _, sol = ctrl.steer(np.array([50.0, 0.4, 0.05, 10.0]), pretraining_track(), 0.12, 0.3)
    assert not sol.converged and delta == 0.12 and ctrl.flagged_steps == 1


def test_qp_matches_brute_force_three_vars():
    rng = np.random.default_rng(10)
    for k in range(40):
        qp = random_qp(rng, 3, rate=k % 2 == 0)
        r = qp_solve(qp)
        assert r.converged
        np.testing.assert_allclose(r.x, brute_force_qp(qp), atol=1e-9)


def test_qp_kkt_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(30):
        qp = random_qp(rng, 10)
        r = qp_solve(qp)
        assert r.converged and r.kkt < 1e-6
        assert kkt_residual(qp, r.x, r.y) < 1e-6


# ----------------------------------------------------------------------- MPC

def test_mpc_straight_on_path_is_zero():
    ctrl = MpcController(P)
    delta, _, sol = ctrl.steer(np.array([50.0, 0.0, 0.0, 10.0]), pretraining_track(), 0.0, 0.3)
    assert sol.converged and abs(delta) <= 1e-6


def brute_force_sequence(X, ref, delta_prev, cfg, grid):
    A, B, c = linearize_model(X, delta_prev, 0.0, P, cfg.t_s)
    qp = build_mpc_qp(X, ref, delta_prev, A, B, c, cfg)
    best, arg = math.inf, None
    for seq in itertools.product(grid, repeat=cfg.horizon):
        u = np.array(seq)
        if np.any(u < qp.lo) or np.any(u > qp.hi) or np.any(np.abs(np.diff(u)) > qp.dhi[0] + 1e-12):
            continue
        val = qp.objective(u)
        if val < best:
            best, arg = val, u
    return arg


def test_mpc_offset_sign_matches_grid_search():
    cfg = MpcConfig(horizon=3, steer_rate_max=5.0)
    path = pretraining_track()
    for y in (0.4, -0.4):
        X = np.array([50.0, y, 0.0, 10.0])
        ref = reference_horizon(path, 50.0, 10.0, 3, 0.1)
        sol = MpcController(P, cfg).solve(X, ref, 0.0, 0.0)
        grid = brute_force_sequence(X, ref, 0.0, cfg, np.linspace(-0.5, 0.5, 41))
        assert np.sign(sol.delta) == np.sign(grid[0]) == -np.sign(y)
        assert abs(sol.delta - grid[0]) <= 0.025 + 1e-9


def test_mpc_bound_active_with_positive_multiplier():
    cfg = MpcConfig()
    X = np.array([0.0, 0.0, 0.0, 10.0])
    ref = np.array([[0.0, 50.0 + 5 * j] for j in range(cfg.horizon)])  # hard left, unreachable
    A, B, c = linearize_model(X, 1.0 - 1e-9, 0.0, P, cfg.t_s)
    qp = build_mpc_qp(X, ref, 1.0, A, B, c, cfg)
    r = qp_solve(qp)
    assert r.converged and r.kkt < 1e-6
    assert r.x[0] == pytest.approx(1.0, abs=1e-9) and r.y[0] > 0
    sol = MpcController(P, cfg).solve(X, ref, 1.0 - 1e-9, 0.0)
    assert sol.delta == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-0.3, 0.3), st.floats(-1.0, 1.0), st.floats(3, 15))
def test_mpc_sequence_feasible(y, theta, delta_prev, v):
    cfg = MpcConfig()
    path = pretraining_track()
    sol = MpcController(P, cfg).solve(np.array([50.0, y, theta, v]),
                                      reference_horizon(path, 50.0, v, cfg.horizon, cfg.t_s), delta_prev, 0.3)
    if not sol.converged:
        return
    assert sol.kkt < 1e-6
    seq = sol.sequence
    rate = cfg.steer_rate_max * cfg.t_s
    assert np.all(np.abs(seq) <= 1.0)
    assert abs(seq[0] - delta_prev) <= rate + 1e-12
    assert np.all(np.abs(np.diff(seq)) <= rate + 1e-12)


def test_mpc_ltv_fixed_point_on_straight():
    cfg = MpcConfig()
    path = pretraining_track()
    X = np.array([50.0, 0.3, 0.0, 10.0])
    ref = reference_horizon(path, 50.0, 10.0, cfg.horizon, cfg.t_s)
    first = MpcController(P, cfg).solve(X, ref, 0.0, 0.3)
    A, B, c = linearize_model(X, first.delta, 0.3, P, cfg.t_s)
    again = qp_solve(build_mpc_qp(X, ref, 0.0, A, B, c, cfg))
    assert abs(again.x[0] - first.delta) < 1e-3


def test_mpc_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=1)
    with pytest.raises(ValueError):
        MpcConfig(steer_min=-0.5)
    assert MpcConfig().horizon == 40 and MpcConfig().q_f == (3.5, 3.5)
