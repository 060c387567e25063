"""Transcription correctness, OCP solves against oracles, tails, relaxation."""

import numpy as np
import pytest

from carnmpc.dynamics import KinematicCarModel, LinearModel
from carnmpc.nlp import QPInfeasible
from carnmpc.ocp import (
    OCPSolution,
    TrackingOCP,
    Transcription,
    build_objective_weights,
    solve_ocp,
    tail,
    transcribe,
)
from carnmpc.reference import ReferenceWindow, synth_track, window

V_CAR, W_CAR = build_objective_weights((1.0, 0.1, 0.001))

RNG = np.random.default_rng(42)


def car_ocp(kind="oval", k0=5, N=11, x0=None, duration=60.0, **kw):
    ref = synth_track(kind, duration=duration, h=0.3, speed=10.0, radius=40.0)
    win = window(ref, k0, N)
    if x0 is None:
        x0 = ref.states[k0]
    return TrackingOCP(k0=k0, x0=x0, N=N, reference_window=win, V=V_CAR, W=W_CAR, **kw)


def random_decision(t):
    z = np.zeros(t.n_z)
    for i in range(t.N):
        z[i * t.nx : (i + 1) * t.nx] = [
            RNG.normal(0, 5),
            RNG.normal(0, 5),
            RNG.normal(0, 0.5),
            RNG.uniform(4, 20),
            RNG.uniform(-0.4, 0.4),
        ]
    for j in range(t.N):
        c = t.u_base + j * t.nu
        z[c : c + t.nu] = [RNG.uniform(-5, 2), RNG.uniform(-0.4, 0.4)]
    return z


def fd_gradient(fun, x, step=1e-6):
    g = np.zeros(x.size)
    for i in range(x.size):
        hi = step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        g[i] = (fun(xp) - fun(xm)) / (2 * hi)
    return g


def fd_jacobian(fun, x, step=1e-6):
    cols = []
    for i in range(x.size):
        hi = step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * hi))
    return np.stack(cols, axis=-1)


def stage_cost(ocp, x, u, k):
    ex = x - ocp.reference_window.states[k]
    eu = u - ocp.reference_window.controls[k]
    return ocp.scale * (ex @ ocp.V @ ex + eu @ ocp.W @ eu)


# -- structure -------------------------------------------------------------


def test_minimal_horizon_dimensions():
    ocp = car_ocp(N=1)
    t = Transcription(ocp)
    assert (t.n_z, t.n_eq, t.n_ineq) == (7, 5, 8)
    assert t.rows_per_state_stage == 4
    assert t.rows_per_control_stage == 4


def test_bound_rows_order_and_values():
    ocp = car_ocp(N=2)
    t = Transcription(ocp)
    z = random_decision(t)
    g = t.nlp.eval_ineq(z, ocp.x0)
    x1, x2 = z[0:5], z[5:10]
    u0, u1 = z[10:12], z[12:14]
    expect = [
        x1[3] - 60, -x1[3], x1[4] - 0.5, -x1[4] - 0.5,
        x2[3] - 60, -x2[3], x2[4] - 0.5, -x2[4] - 0.5,
        u0[0] - 3, -u0[0] - 12, u0[1] - 0.5, -u0[1] - 0.5,
        u1[0] - 3, -u1[0] - 12, u1[1] - 0.5, -u1[1] - 0.5,
    ]
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_rollout_guess_has_zero_defects():
    ocp = car_ocp(N=6)
    t = Transcription(ocp)
    controls = ocp.reference_window.controls[:6]
    states = [ocp.x0]
    for k in range(6):
        states.append(ocp.model.step(states[k], controls[k]))
    z0 = t.pack(np.asarray(states), controls)
    assert np.abs(t.nlp.eval_eq(z0, ocp.x0)).max() < 1e-12
    back_states, back_controls = t.unpack(z0, ocp.x0)
    np.testing.assert_array_equal(back_states, states)
    np.testing.assert_array_equal(back_controls, controls)


# -- derivative callbacks vs finite differences -----------------------------


def test_transcription_first_derivatives():
    ocp = car_ocp(N=3, x0=np.array([1.0, -2.0, 0.2, 12.0, 0.1]))
    t = Transcription(ocp)
    nlp = t.nlp
    z = random_decision(t)
    p = ocp.x0

    g_fd = fd_gradient(lambda zz: nlp.objective(zz, p), z)
    np.testing.assert_allclose(nlp.grad(z, p), g_fd, rtol=1e-6, atol=1e-7)

    J_fd = fd_jacobian(lambda zz: nlp.eval_eq(zz, p), z)
    np.testing.assert_allclose(nlp.jac_eq_z(z, p), J_fd, rtol=1e-6, atol=1e-7)

    Jp_fd = fd_jacobian(lambda pp: nlp.eval_eq(z, pp), p.copy())
    np.testing.assert_allclose(nlp.jac_eq_p(z, p), Jp_fd, rtol=1e-6, atol=1e-7)


def test_transcription_second_derivatives():
    ocp = car_ocp(N=3)
    t = Transcription(ocp)
    nlp = t.nlp
    z = random_decision(t)
    p = np.array([0.5, -1.0, 0.1, 11.0, -0.05])
    lam = RNG.normal(size=t.n_eq)
    mu = np.abs(RNG.normal(size=t.n_ineq))

    H_fd = fd_jacobian(lambda zz: nlp.lagrangian_grad(zz, p, lam, mu), z)
    H = nlp.hess_zz(z, p, lam, mu)
    np.testing.assert_allclose(H, 0.5 * (H_fd + H_fd.T), rtol=1e-5, atol=5e-6)
    np.testing.assert_allclose(H, H.T, atol=1e-13)

    Z_fd = fd_jacobian(lambda pp: nlp.lagrangian_grad(z, pp, lam, mu), p.copy())
    np.testing.assert_allclose(nlp.hess_zp(z, p, lam, mu), Z_fd, rtol=1e-5, atol=5e-6)


# -- solves against oracles --------------------------------------------------


def test_on_reference_start_is_already_optimal():
    ocp = car_ocp(kind="circle", k0=3, N=8)
    sol = solve_ocp(ocp)
    assert sol.objective_value <= 1e-18
    assert sol.kkt.iterations == 0
    assert not sol.relaxation_used
    np.testing.assert_allclose(sol.controls, ocp.reference_window.controls[:8], atol=1e-12)
    assert sol.kkt.regularity is not None


def riccati_controls(A, B, Q, R, N, x0):
    """Finite-horizon LQR with no terminal weight: u_k = -K_k x_k."""
    P = np.zeros_like(A)
    gains = []
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    gains.reverse()
    xs, us = [np.asarray(x0, float)], []
    for k in range(N):
        u = -gains[k] @ xs[k]
        us.append(u)
        xs.append(A @ xs[k] + B @ u)
    cost = sum(x @ Q @ x + u @ R @ u for x, u in zip(xs[:-1], us))
    return np.asarray(xs), np.asarray(us), float(cost), P


def test_linear_quadratic_matches_riccati():
    h = 0.1
    A = np.array([[1.0, h], [0.0, 1.0]])
    B = np.array([[0.5 * h * h], [h]])
    Q = np.diag([1.0, 0.1])
    R = np.array([[0.01]])
    N = 6
    x0 = np.array([1.0, -0.5])
    win = ReferenceWindow(states=np.zeros((N + 1, 2)), controls=np.zeros((N + 1, 1)))
    ocp = TrackingOCP(
        k0=0, x0=x0, N=N, reference_window=win, V=Q, W=R,
        model=LinearModel(A, B), integral_scaling=False,
    )
    sol = solve_ocp(ocp)
    xs, us, cost, P0 = riccati_controls(A, B, Q, R, N, x0)
    np.testing.assert_allclose(sol.controls, us, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(sol.states, xs, rtol=1e-8, atol=1e-10)
    assert sol.objective_value == pytest.approx(cost, rel=1e-10)
    assert sol.objective_value == pytest.approx(float(x0 @ P0 @ x0), rel=1e-10)


def test_displaced_start_converges_and_steers_back():
    # car starts 8.3 m left of a straight reference
    ocp = car_ocp(kind="straight", k0=0, N=11, x0=np.array([0.0, 8.3, 0.0, 10.0, 0.0]))
    sol = solve_ocp(ocp)
    assert sol.kkt.kkt_residual <= 1e-8
    assert sol.kkt.feasibility <= 1e-8
    assert sol.objective_value > 1.0
    assert sol.controls[0, 1] < 0.0  # steer toward negative y
    assert not sol.relaxation_used


def test_warm_start_shift_converges_fast():
    ocp0 = car_ocp(k0=5, N=11, x0=None)
    base = solve_ocp(car_ocp(k0=5, N=11, x0=ocp0.x0 + np.array([0, 1.5, 0, 0, 0])))
    ocp1 = car_ocp(k0=6, N=11, x0=base.states[1])
    warm = solve_ocp(ocp1, warm_start=base)
    cold = solve_ocp(ocp1)
    assert warm.kkt.iterations <= 6
    assert warm.kkt.iterations < cold.kkt.iterations
    assert warm.kkt.kkt_residual <= 1e-9
    np.testing.assert_allclose(warm.controls, cold.controls, atol=1e-7)


# -- tails -------------------------------------------------------------------


def test_tail_is_kkt_point_of_shortened_problem():
    x0 = np.array([0.0, 2.0, 0.0, 10.0, 0.0])
    sol = solve_ocp(car_ocp(kind="straight", k0=0, N=11, x0=x0))
    for j in (1, 2, 3):
        tl = tail(sol, j)
        assert tl.ocp.N == 11 - j
        assert tl.ocp.k0 == j
        assert tl.kkt.kkt_residual <= 1e-7
        assert tl.kkt.feasibility <= 1e-9
        assert tl.kkt.complementarity <= 1e-8
        head = sum(stage_cost(sol.ocp, sol.states[k], sol.controls[k], k) for k in range(j))
        assert sol.objective_value == pytest.approx(head + tl.objective_value, abs=1e-12)
        np.testing.assert_array_equal(tl.states, sol.states[j:])


def test_tail_zero_is_identity():
    sol = solve_ocp(car_ocp(N=5))
    tl = tail(sol, 0)
    np.testing.assert_array_equal(tl.states, sol.states)
    np.testing.assert_array_equal(tl.controls, sol.controls)
    assert tl.objective_value == sol.objective_value
    with pytest.raises(ValueError):
        tail(sol, 5)


# -- elastic relaxation --------------------------------------------------------


def test_overspeed_start_is_hard_infeasible():
    # v0 = 70 forces v1 >= 66.4 > 60 under the braking bound: hard problem infeasible
    from carnmpc import nlp as nlpmod

    x0 = np.array([0.0, 0.0, 0.0, 70.0, 0.0])
    ocp = car_ocp(kind="straight", k0=0, N=4, x0=x0)
    t = Transcription(ocp)
    controls = ocp.reference_window.controls[:4]
    states = [x0]
    for k in range(4):
        states.append(ocp.model.step(states[k], controls[k]))
    z0 = t.pack(np.asarray(states), controls)
    with pytest.raises(QPInfeasible):
        nlpmod.solve(t.nlp, x0, z0)


def test_elastic_relaxation_recovers():
    x0 = np.array([0.0, 0.0, 0.0, 70.0, 0.0])
    ocp = car_ocp(kind="straight", k0=0, N=4, x0=x0)
    sol = solve_ocp(ocp)
    assert sol.relaxation_used
    assert sol.controls[0, 0] == pytest.approx(-12.0, abs=1e-6)  # full braking
    assert sol.relaxation_magnitude == pytest.approx(6.4, abs=0.05)
    assert sol.states[1, 3] == pytest.approx(66.4, abs=0.05)
    assert sol.kkt.kkt_residual <= 1e-8


# -- validation ---------------------------------------------------------------


def test_weight_builder():
    V, W = build_objective_weights((2.0, 0.5, 0.01))
    np.testing.assert_array_equal(np.diag(V), [2.0, 2.0, 0.0, 0.5, 0.0])
    np.testing.assert_array_equal(np.diag(W), [0.01, 0.01])
    with pytest.raises(ValueError):
        build_objective_weights((-1.0, 0.1, 0.001))


def test_ocp_validation_errors():
    ref = synth_track("straight", duration=30.0, h=0.3)
    win = window(ref, 0, 4)
    ok = dict(k0=0, x0=ref.states[0], reference_window=win, V=V_CAR, W=W_CAR)
    with pytest.raises(ValueError, match="horizon"):
        TrackingOCP(N=0, **ok)
    with pytest.raises(ValueError, match="window"):
        TrackingOCP(N=9, **ok)
    with pytest.raises(ValueError, match="symmetric"):
        TrackingOCP(N=4, **{**ok, "V": np.triu(np.ones((5, 5)))})
    with pytest.raises(ValueError, match="bounds"):
        TrackingOCP(N=4, state_lower=np.full(5, 1.0), state_upper=np.zeros(5), **ok)
    with pytest.raises(ValueError, match="semidefinite"):
        TrackingOCP(N=4, **{**ok, "W": -np.eye(2)})


def test_default_bounds_depend_on_model():
    ocp = car_ocp(N=2)
    assert ocp.control_lower[0] == -12.0
    win = ReferenceWindow(states=np.zeros((3, 2)), controls=np.zeros((3, 1)))
    lin = TrackingOCP(
        k0=0, x0=np.zeros(2), N=2, reference_window=win,
        V=np.eye(2), W=np.eye(1), model=LinearModel(np.eye(2), np.eye(2)[:, :1]),
    )
    assert Transcription(lin).n_ineq == 0
    assert lin.h == 1.0


def test_objective_scale_switch():
    ocp_scaled = car_ocp(N=3, x0=np.array([0.0, 1.0, 0.0, 10.0, 0.0]), k0=0, kind="straight")
    ocp_plain = car_ocp(
        N=3, x0=np.array([0.0, 1.0, 0.0, 10.0, 0.0]), k0=0, kind="straight",
        integral_scaling=False,
    )
    t1, t2 = Transcription(ocp_scaled), Transcription(ocp_plain)
    z = random_decision(t1)
    a = t1.nlp.objective(z, ocp_scaled.x0)
    b = t2.nlp.objective(z, ocp_plain.x0)
    assert a == pytest.approx(0.3 * b, rel=1e-12)
