"""Discrete-time tracking optimal control problems and their NLP form.

An OCP over horizon N tracks a reference window under box bounds on states
and controls.  The decision vector stacks states then controls,

    z = [x_1, ..., x_N, u_0, ..., u_{N-1}],

with the initial state entering as the NLP parameter p, so every solve is a
member of a parametric family NLP(p) and admits KKT sensitivities in p.
Equalities are the N single-step defects x_{l+1} - F(x_l, u_l); inequalities
collect the finite box bounds, state rows (stages 1..N) first, control rows
(stages 0..N-1) after.  The objective is a rectangle-rule tracking sum over
stages 0..N-1 (no terminal term); the stage-0 state term depends on p only
and is kept so objective values are comparable across parameter changes.

``solve_ocp`` retries once with an elastic relaxation (L1-penalized slacks on
the state rows) when the linearized constraints are infeasible; such
solutions are flagged and must not feed the sensitivity machinery.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nlp as nlpmod
from .dynamics import KinematicCarModel
from .nlp import KKTSolution, ParametricNLP, QPInfeasible, active_set, check_strong_regularity
from .reference import ReferenceWindow

__all__ = [
    "CAR_CONTROL_LOWER",
    "CAR_CONTROL_UPPER",
    "CAR_STATE_LOWER",
    "CAR_STATE_UPPER",
    "DEFAULT_ELASTIC_PENALTY",
    "OCPSolution",
    "TrackingOCP",
    "Transcription",
    "build_objective_weights",
    "solve_ocp",
    "tail",
    "transcribe",
]

logger = logging.getLogger(__name__)

INF = np.inf

CAR_STATE_LOWER = np.array([-INF, -INF, -INF, 0.0, -0.5])
CAR_STATE_UPPER = np.array([INF, INF, INF, 60.0, 0.5])
CAR_CONTROL_LOWER = np.array([-12.0, -0.5])
CAR_CONTROL_UPPER = np.array([3.0, 0.5])

DEFAULT_ELASTIC_PENALTY = 1e4


def build_objective_weights(alpha=(1.0, 0.1, 0.001)):
    """Diagonal tracking weights (V, W) from (alpha1, alpha2, alpha3):
    alpha1 on position, alpha2 on speed, alpha3 on both controls; heading
    and steering angle are unweighted."""
    a1, a2, a3 = (float(a) for a in alpha)
    if a1 < 0.0 or a2 < 0.0 or a3 < 0.0:
        raise ValueError("objective weights must be nonnegative")
    V = np.diag([a1, a1, 0.0, a2, 0.0])
    W = np.diag([a3, a3])
    return V, W


def _check_weight(M, n, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}")
    if np.abs(M - M.T).max() > 1e-12:
        raise ValueError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(M)[0] < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True)
class TrackingOCP:
    """One tracking OCP instance.

    Bounds default to the car's box constraints when the model is the
    kinematic car, and to unbounded otherwise.  ``h`` (the objective's
    rectangle width) defaults to the model step size when the model carries
    one; set ``integral_scaling=False`` for a plain unscaled sum.
    """

    k0: int
    x0: np.ndarray
    N: int
    reference_window: ReferenceWindow
    V: np.ndarray
    W: np.ndarray
    model: object = None
    state_lower: Optional[np.ndarray] = None
    state_upper: Optional[np.ndarray] = None
    control_lower: Optional[np.ndarray] = None
    control_upper: Optional[np.ndarray] = None
    h: Optional[float] = None
    integral_scaling: bool = True

    def __post_init__(self):
        model = self.model if self.model is not None else KinematicCarModel()
        object.__setattr__(self, "model", model)
        nx, nu = model.n_x, model.n_u
        if self.N < 1:
            raise ValueError("horizon must contain at least one interval")
        x0 = np.asarray(self.x0, dtype=float).reshape(nx)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "V", _check_weight(self.V, nx, "V"))
        object.__setattr__(self, "W", _check_weight(self.W, nu, "W"))

        is_car = isinstance(model, KinematicCarModel)
        defaults = (
            (CAR_STATE_LOWER, CAR_STATE_UPPER, CAR_CONTROL_LOWER, CAR_CONTROL_UPPER)
            if is_car
            else (np.full(nx, -INF), np.full(nx, INF), np.full(nu, -INF), np.full(nu, INF))
        )
        names = ("state_lower", "state_upper", "control_lower", "control_upper")
        sizes = (nx, nx, nu, nu)
        for name, default, size in zip(names, defaults, sizes):
            value = getattr(self, name)
            value = default.copy() if value is None else np.asarray(value, float).reshape(size)
            object.__setattr__(self, name, value)
        if np.any(self.state_lower > self.state_upper) or np.any(
            self.control_lower > self.control_upper
        ):
            raise ValueError("lower bounds exceed upper bounds")

        win = self.reference_window
        if win.states.shape[0] < self.N + 1 or win.controls.shape[0] < self.N + 1:
            raise ValueError("reference window shorter than horizon")
        if win.states.shape[1] != nx or win.controls.shape[1] != nu:
            raise ValueError("reference window dimensions do not match the model")

        if self.h is None:
            params = getattr(model, "params", None)
            object.__setattr__(self, "h", getattr(params, "step_h", 1.0))
        if self.h <= 0.0:
            raise ValueError("objective step width must be positive")

    @property
    def scale(self) -> float:
        return self.h if self.integral_scaling else 1.0


def _finite_bound_rows(lower, upper):
    """(sign, component, offset) per finite bound row; upper before lower."""
    rows = []
    for a in range(lower.size):
        if np.isfinite(upper[a]):
            rows.append((1.0, a, upper[a]))
        if np.isfinite(lower[a]):
            rows.append((-1.0, a, -lower[a]))
    return rows


class Transcription:
    """Index bookkeeping and NLP callbacks for one TrackingOCP.

    Layout facts other modules rely on: equality row block l (size n_x) is
    the defect of interval l; inequality rows come in per-stage groups of
    ``rows_per_state_stage`` for stages 1..N, then per-stage groups of
    ``rows_per_control_stage`` for stages 0..N-1.
    """

    def __init__(self, ocp: TrackingOCP):
        self.ocp = ocp
        model = ocp.model
        nx, nu, N = model.n_x, model.n_u, ocp.N
        self.nx, self.nu, self.N = nx, nu, N
        self.n_z = N * (nx + nu)
        self.n_eq = N * nx
        self.u_base = N * nx

        state_rows = _finite_bound_rows(ocp.state_lower, ocp.state_upper)
        control_rows = _finite_bound_rows(ocp.control_lower, ocp.control_upper)
        self.rows_per_state_stage = len(state_rows)
        self.rows_per_control_stage = len(control_rows)
        self.n_state_rows = N * self.rows_per_state_stage
        self.n_ineq = self.n_state_rows + N * self.rows_per_control_stage

        P = np.zeros((self.n_ineq, self.n_z))
        q = np.zeros(self.n_ineq)
        for i in range(N):  # state stage i+1 lives at columns i*nx
            for t, (sign, a, off) in enumerate(state_rows):
                r = i * self.rows_per_state_stage + t
                P[r, i * nx + a] = sign
                q[r] = off
        for j in range(N):
            for t, (sign, a, off) in enumerate(control_rows):
                r = self.n_state_rows + j * self.rows_per_control_stage + t
                P[r, self.u_base + j * nu + a] = sign
                q[r] = off
        self.bound_matrix = P
        self.bound_offsets = q

        scale = ocp.scale
        xr = ocp.reference_window.states[:N]
        ur = ocp.reference_window.controls[:N]
        V, W = ocp.V, ocp.W

        H_obj = np.zeros((self.n_z, self.n_z))
        for i in range(N - 1):  # x_N carries no objective term
            H_obj[i * nx : (i + 1) * nx, i * nx : (i + 1) * nx] = 2.0 * scale * V
        for j in range(N):
            c = self.u_base + j * nu
            H_obj[c : c + nu, c : c + nu] = 2.0 * scale * W
        self._H_obj = H_obj

        def split(z):
            return z[: N * nx].reshape(N, nx), z[N * nx :].reshape(N, nu)

        def stage_states(z, p):
            X, U = split(z)
            return np.vstack([p[None, :], X[:-1]]) if N > 1 else p[None, :], X, U

        def objective(z, p):
            S, X, U = stage_states(z, p)
            ex = S - xr
            eu = U - ur
            return scale * (float(np.sum(ex * (ex @ V))) + float(np.sum(eu * (eu @ W))))

        def gradient(z, p):
            _, X, U = stage_states(z, p)
            g = np.zeros(self.n_z)
            if N > 1:
                gx = 2.0 * scale * ((X[: N - 1] - xr[1:N]) @ V)
                g[: (N - 1) * nx] = gx.ravel()
            g[self.u_base :] = (2.0 * scale * ((U - ur) @ W)).ravel()
            return g

        def eq(z, p):
            S, X, U = stage_states(z, p)
            out = np.empty((N, nx))
            for l in range(N):
                out[l] = X[l] - model.step(S[l], U[l])
            return out.ravel()

        def eq_jac_z(z, p):
            S, X, U = stage_states(z, p)
            J = np.zeros((self.n_eq, self.n_z))
            for l in range(N):
                r = l * nx
                jac = model.jac(S[l], U[l])
                J[r : r + nx, l * nx : (l + 1) * nx] = np.eye(nx)
                if l > 0:
                    J[r : r + nx, (l - 1) * nx : l * nx] = -jac[:, :nx]
                c = self.u_base + l * nu
                J[r : r + nx, c : c + nu] = -jac[:, nx:]
            return J

        def eq_jac_p(z, p):
            _, _, U = stage_states(z, p)
            J = np.zeros((self.n_eq, nx))
            J[:nx] = -model.jac(p, U[0])[:, :nx]
            return J

        def ineq(z, p):
            return P @ z - q

        def lag_hess_zz(z, p, lam, mu):
            S, X, U = stage_states(z, p)
            H = self._H_obj.copy()
            for l in range(N):
                C = model.curvature(S[l], U[l], lam[l * nx : (l + 1) * nx])
                c = self.u_base + l * nu
                H[c : c + nu, c : c + nu] -= C[nx:, nx:]
                if l > 0:
                    r = (l - 1) * nx
                    H[r : r + nx, r : r + nx] -= C[:nx, :nx]
                    H[r : r + nx, c : c + nu] -= C[:nx, nx:]
                    H[c : c + nu, r : r + nx] -= C[nx:, :nx]
            return H

        def lag_hess_zp(z, p, lam, mu):
            _, _, U = stage_states(z, p)
            C = model.curvature(p, U[0], lam[:nx])
            Z = np.zeros((self.n_z, nx))
            Z[self.u_base : self.u_base + nu] = -C[nx:, :nx]
            return Z

        self.nlp = ParametricNLP(
            dim_z=self.n_z,
            dim_p=nx,
            objective=objective,
            gradient=gradient,
            eq=eq,
            eq_jac_z=eq_jac_z,
            eq_jac_p=eq_jac_p,
            ineq=ineq,
            ineq_jac_z=lambda z, p: P,
            ineq_jac_p=lambda z, p: np.zeros((self.n_ineq, nx)),
            lag_hess_zz=lag_hess_zz,
            lag_hess_zp=lag_hess_zp,
            n_eq=self.n_eq,
            n_ineq=self.n_ineq,
        )

    # -- packing -----------------------------------------------------------

    def pack(self, states, controls) -> np.ndarray:
        """z from trajectory arrays; states has N+1 rows (row 0 is dropped)."""
        states = np.asarray(states, float)
        controls = np.asarray(controls, float)
        return np.concatenate([states[1:].ravel(), controls.ravel()])

    def unpack(self, z, x0):
        X = z[: self.N * self.nx].reshape(self.N, self.nx)
        U = z[self.u_base :].reshape(self.N, self.nu)
        states = np.vstack([np.asarray(x0, float)[None, :], X])
        return states, U.copy()

    def state_bound_values(self, z) -> np.ndarray:
        return (self.bound_matrix @ z - self.bound_offsets)[: self.n_state_rows]

    # -- elastic relaxation --------------------------------------------------

    def elastic_nlp(self, penalty: float = DEFAULT_ELASTIC_PENALTY) -> ParametricNLP:
        """State bound rows get L1-penalized slacks; control rows stay hard."""
        base = self.nlp
        n_z, n_s = self.n_z, self.n_state_rows
        P, q = self.bound_matrix, self.bound_offsets

        P_ext = np.zeros((self.n_ineq + n_s, n_z + n_s))
        P_ext[: self.n_ineq, :n_z] = P
        P_ext[:n_s, n_z:] = -np.eye(n_s)
        P_ext[self.n_ineq :, n_z:] = -np.eye(n_s)
        q_ext = np.concatenate([q, np.zeros(n_s)])

        def objective(z, p):
            return base.objective(z[:n_z], p) + penalty * float(z[n_z:].sum())

        def gradient(z, p):
            g = np.empty(n_z + n_s)
            g[:n_z] = base.grad(z[:n_z], p)
            g[n_z:] = penalty
            return g

        def eq(z, p):
            return base.eq(z[:n_z], p)

        def eq_jac_z(z, p):
            J = np.zeros((self.n_eq, n_z + n_s))
            J[:, :n_z] = base.eq_jac_z(z[:n_z], p)
            return J

        def lag_hess_zz(z, p, lam, mu):
            H = np.zeros((n_z + n_s, n_z + n_s))
            H[:n_z, :n_z] = base.lag_hess_zz(z[:n_z], p, lam, mu)
            return H

        def lag_hess_zp(z, p, lam, mu):
            Z = np.zeros((n_z + n_s, self.nx))
            Z[:n_z] = base.lag_hess_zp(z[:n_z], p, lam, mu)
            return Z

        return ParametricNLP(
            dim_z=n_z + n_s,
            dim_p=self.nx,
            objective=objective,
            gradient=gradient,
            eq=eq,
            eq_jac_z=eq_jac_z,
            eq_jac_p=lambda z, p: base.eq_jac_p(z[:n_z], p),
            ineq=lambda z, p: P_ext @ z - q_ext,
            ineq_jac_z=lambda z, p: P_ext,
            ineq_jac_p=lambda z, p: np.zeros((self.n_ineq + n_s, self.nx)),
            lag_hess_zz=lag_hess_zz,
            lag_hess_zp=lag_hess_zp,
            n_eq=self.n_eq,
            n_ineq=self.n_ineq + n_s,
        )


def transcribe(ocp: TrackingOCP) -> ParametricNLP:
    """The parametric NLP of the OCP (see Transcription for the layout)."""
    return Transcription(ocp).nlp


@dataclass
class OCPSolution:
    """Solved OCP: trajectory arrays plus the raw KKT data.

    ``kkt`` indexes the stacked decision vector; for relaxed solves it refers
    to the extended (slack-augmented) problem and ``relaxation_used`` is set.
    """

    ocp: TrackingOCP
    states: np.ndarray
    controls: np.ndarray
    objective_value: float
    kkt: KKTSolution
    relaxation_used: bool = False
    relaxation_magnitude: float = 0.0


def _rollout(model, x0, controls):
    N = controls.shape[0]
    states = np.empty((N + 1, model.n_x))
    states[0] = x0
    for k in range(N):
        states[k + 1] = model.step(states[k], controls[k])
    return states


def _initial_controls(ocp: TrackingOCP, warm_start: Optional[OCPSolution]) -> np.ndarray:
    if warm_start is not None:
        shift = ocp.k0 - warm_start.ocp.k0
        old = np.asarray(warm_start.controls, float)
        if shift >= 0 and old.shape[1] == ocp.model.n_u and old.size:
            rows = [old[min(shift + j, old.shape[0] - 1)] for j in range(ocp.N)]
            return np.clip(np.asarray(rows), ocp.control_lower, ocp.control_upper)
        logger.debug("warm start ignored (shift %d, shape %s)", shift, old.shape)
    ref_u = ocp.reference_window.controls[: ocp.N]
    return np.clip(ref_u, ocp.control_lower, ocp.control_upper)


def solve_ocp(
    ocp: TrackingOCP,
    warm_start: Optional[OCPSolution] = None,
    *,
    z0: Optional[np.ndarray] = None,
    tol: float = nlpmod.DEFAULT_TOL,
    max_iter: int = nlpmod.MAX_ITERATIONS,
    with_regularity: bool = True,
    elastic_penalty: float = DEFAULT_ELASTIC_PENALTY,
) -> OCPSolution:
    """Solve the OCP, warm-started by shifting a previous solution.

    The initial guess rolls the (shifted or reference) controls forward from
    x0, so the defects start at zero; an explicit ``z0`` (for example a
    first-order update of an earlier solution) overrides that construction.
    An infeasible linearization triggers one retry with the elastic
    relaxation.
    """
    t = Transcription(ocp)
    if z0 is None:
        controls0 = _initial_controls(ocp, warm_start)
        z0 = t.pack(_rollout(ocp.model, ocp.x0, controls0), controls0)
    else:
        z0 = np.asarray(z0, float)
        if z0.shape != (t.n_z,):
            raise ValueError(f"z0 has shape {z0.shape}, expected ({t.n_z},)")
    try:
        sol = nlpmod.solve(
            t.nlp, ocp.x0, z0, tol=tol, max_iter=max_iter, with_regularity=with_regularity
        )
        states, controls = t.unpack(sol.z_star, ocp.x0)
        return OCPSolution(ocp, states, controls, sol.objective_value, sol)
    except QPInfeasible:
        logger.info("OCP at k0=%d infeasible; retrying with elastic relaxation", ocp.k0)
    relaxed = t.elastic_nlp(elastic_penalty)
    s0 = np.maximum(t.state_bound_values(z0), 0.0)
    sol = nlpmod.solve(
        relaxed,
        ocp.x0,
        np.concatenate([z0, s0]),
        tol=tol,
        max_iter=max_iter,
        with_regularity=with_regularity,
    )
    z = sol.z_star[: t.n_z]
    slack = sol.z_star[t.n_z :]
    states, controls = t.unpack(z, ocp.x0)
    objective = float(t.nlp.objective(z, ocp.x0))
    magnitude = float(slack.max()) if slack.size else 0.0
    return OCPSolution(ocp, states, controls, objective, sol, True, magnitude)


def tail(sol: OCPSolution, j: int) -> OCPSolution:
    """The j-step tail of a solved OCP, restricted without re-solving.

    The tail trajectory and the corresponding slice of the multipliers are
    exactly the solution of the shortened OCP anchored at the j-th predicted
    state; KKT residuals are re-evaluated honestly on the tail problem.
    """
    ocp = sol.ocp
    if not 0 <= j <= ocp.N - 1:
        raise ValueError(f"tail index {j} outside [0, {ocp.N - 1}]")
    t_full = Transcription(ocp)
    tail_ocp = dataclasses.replace(
        ocp,
        k0=ocp.k0 + j,
        x0=sol.states[j],
        N=ocp.N - j,
        reference_window=ocp.reference_window.shifted(j),
    )
    t = Transcription(tail_ocp)
    z = t.pack(sol.states[j:], sol.controls[j:])
    lam = np.asarray(sol.kkt.lambda_star, float)[j * t_full.nx :]
    mu_full = np.asarray(sol.kkt.mu_star, float)
    mu_state = mu_full[: t_full.n_state_rows]
    mu_ctrl = mu_full[t_full.n_state_rows : t_full.n_ineq]
    mu = np.concatenate(
        [
            mu_state[j * t_full.rows_per_state_stage :],
            mu_ctrl[j * t_full.rows_per_control_stage :],
        ]
    )

    p = tail_ocp.x0
    g_values = t.nlp.eval_ineq(z, p)
    h_values = t.nlp.eval_eq(z, p)
    stat = float(np.abs(t.nlp.lagrangian_grad(z, p, lam, mu)).max())
    feas = float(np.abs(h_values).max()) if h_values.size else 0.0
    if g_values.size:
        feas = max(feas, float(np.maximum(g_values, 0.0).max()))
    comp = float(np.abs(mu * g_values).max()) if g_values.size else 0.0
    kkt = KKTSolution(
        z_star=z,
        mu_star=mu,
        lambda_star=lam,
        active_set=active_set(g_values, mu),
        kkt_residual=stat,
        feasibility=feas,
        complementarity=comp,
        objective_value=float(t.nlp.objective(z, p)),
        iterations=0,
        regularity=None,
    )
    kkt.regularity = check_strong_regularity(t.nlp, kkt, p)
    return OCPSolution(
        tail_ocp,
        sol.states[j:].copy(),
        sol.controls[j:].copy(),
        kkt.objective_value,
        kkt,
        sol.relaxation_used,
        sol.relaxation_magnitude,
    )
