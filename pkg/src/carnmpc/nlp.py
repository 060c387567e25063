"""Parametric NLP representation and an SQP solver with exact KKT output.

The problem class is

    NLP(p):  minimize J(z, p)
             subject to H(z, p)  = 0
                        G(z, p) <= 0

with a fixed parameter vector p.  ``solve`` runs line-search SQP: the exact
Lagrangian Hessian drives the QP subproblems when second-derivative callbacks
are available, a damped BFGS approximation otherwise; multipliers always come
from the final QP.  ``check_strong_regularity`` verifies the four conditions
(LICQ, KKT, strict complementarity, positive definite reduced Hessian on the
critical cone) that the sensitivity system requires.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla

from .qp import QPInfeasible, solve_qp

__all__ = [
    "Degenerate",
    "KKTSolution",
    "MaxIterations",
    "ParametricNLP",
    "QPInfeasible",
    "RegularityReport",
    "active_set",
    "check_strong_regularity",
    "solve",
]

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
ACTIVE_SET_TOL = 1e-6
REGULARITY_TOL = 1e-8
MAX_ITERATIONS = 200
MULTIPLIER_LIMIT = 1e10


class MaxIterations(RuntimeError):
    """Iteration budget exhausted before reaching the requested tolerance."""


class Degenerate(RuntimeError):
    """Multipliers unbounded (constraint qualification failure)."""


Array = np.ndarray
Fun = Callable[..., Array]


@dataclass(frozen=True)
class ParametricNLP:
    """Callbacks defining NLP(p); missing derivatives fall back to
    finite differences (gradients) or BFGS (Hessians)."""

    dim_z: int
    dim_p: int
    objective: Callable[[Array, Array], float]
    gradient: Optional[Fun] = None
    eq: Optional[Fun] = None
    eq_jac_z: Optional[Fun] = None
    eq_jac_p: Optional[Fun] = None
    ineq: Optional[Fun] = None
    ineq_jac_z: Optional[Fun] = None
    ineq_jac_p: Optional[Fun] = None
    lag_hess_zz: Optional[Callable[[Array, Array, Array, Array], Array]] = None
    lag_hess_zp: Optional[Callable[[Array, Array, Array, Array], Array]] = None
    n_eq: int = 0
    n_ineq: int = 0

    # -- evaluation helpers with finite-difference fallbacks ---------------

    def eval_eq(self, z, p):
        return np.asarray(self.eq(z, p), float) if self.eq else np.zeros(0)

    def eval_ineq(self, z, p):
        return np.asarray(self.ineq(z, p), float) if self.ineq else np.zeros(0)

    def grad(self, z, p):
        if self.gradient is not None:
            return np.asarray(self.gradient(z, p), float)
        return _fd_gradient(lambda zz: self.objective(zz, p), z)

    def jac_eq_z(self, z, p):
        if self.n_eq == 0:
            return np.zeros((0, self.dim_z))
        if self.eq_jac_z is not None:
            return np.asarray(self.eq_jac_z(z, p), float)
        return _fd_jacobian(lambda zz: self.eval_eq(zz, p), z, self.n_eq)

    def jac_eq_p(self, z, p):
        if self.n_eq == 0:
            return np.zeros((0, self.dim_p))
        if self.eq_jac_p is not None:
            return np.asarray(self.eq_jac_p(z, p), float)
        return _fd_jacobian(lambda pp: self.eq(z, pp), p, self.n_eq)

    def jac_ineq_z(self, z, p):
        if self.n_ineq == 0:
            return np.zeros((0, self.dim_z))
        if self.ineq_jac_z is not None:
            return np.asarray(self.ineq_jac_z(z, p), float)
        return _fd_jacobian(lambda zz: self.eval_ineq(zz, p), z, self.n_ineq)

    def jac_ineq_p(self, z, p):
        if self.n_ineq == 0:
            return np.zeros((0, self.dim_p))
        if self.ineq_jac_p is not None:
            return np.asarray(self.ineq_jac_p(z, p), float)
        return _fd_jacobian(lambda pp: self.ineq(z, pp), p, self.n_ineq)

    @property
    def has_exact_hessian(self) -> bool:
        return self.lag_hess_zz is not None

    def lagrangian_grad(self, z, p, lam, mu):
        g = self.grad(z, p)
        if self.n_eq:
            g = g + self.jac_eq_z(z, p).T @ lam
        if self.n_ineq:
            g = g + self.jac_ineq_z(z, p).T @ mu
        return g

    def hess_zz(self, z, p, lam, mu):
        """Exact callback when present, else central differences of the
        Lagrangian gradient (test-scale problems only)."""
        if self.lag_hess_zz is not None:
            return np.asarray(self.lag_hess_zz(z, p, lam, mu), float)
        H = _fd_jacobian(
            lambda zz: self.lagrangian_grad(zz, p, lam, mu), z, self.dim_z, step=1e-6
        )
        return 0.5 * (H + H.T)

    def hess_zp(self, z, p, lam, mu):
        if self.lag_hess_zp is not None:
            return np.asarray(self.lag_hess_zp(z, p, lam, mu), float)
        return _fd_jacobian(
            lambda pp: self.lagrangian_grad(z, pp, lam, mu), p, self.dim_z, step=1e-6
        ).reshape(self.dim_z, self.dim_p)


def _fd_gradient(fun, x, step=1e-7):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        hi = step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        g[i] = (fun(xp) - fun(xm)) / (2 * hi)
    return g


def _fd_jacobian(fun, x, n_out, step=1e-7):
    x = np.asarray(x, float)
    J = np.zeros((n_out, x.size))
    for i in range(x.size):
        hi = step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        J[:, i] = (np.asarray(fun(xp), float) - np.asarray(fun(xm), float)) / (2 * hi)
    return J


@dataclass
class RegularityReport:
    licq_ok: bool
    licq_sigma_min: float
    kkt_ok: bool
    kkt_residual: float
    strict_complementarity_ok: bool
    strict_complementarity_margin: float
    second_order_ok: bool
    second_order_eigmin: float

    @property
    def strongly_regular(self) -> bool:
        return (
            self.licq_ok
            and self.kkt_ok
            and self.strict_complementarity_ok
            and self.second_order_ok
        )


@dataclass
class KKTSolution:
    z_star: Array
    mu_star: Array
    lambda_star: Array
    active_set: tuple
    kkt_residual: float
    feasibility: float
    complementarity: float
    objective_value: float
    iterations: int
    regularity: RegularityReport = field(repr=False, default=None)


def active_set(g_values, mu, tol: float = ACTIVE_SET_TOL) -> tuple:
    """Indices (0-based) of inequality rows with G_i >= -tol.

    Boundary-inclusive: a row exactly at -tol counts as active.  mu is part
    of the signature for callers that key the set on multipliers; the set
    itself is defined by constraint values alone.
    """
    g_values = np.asarray(g_values, float)
    mu = np.asarray(mu, float)
    if g_values.shape != mu.shape:
        raise ValueError("g_values and mu must have matching shapes")
    return tuple(int(i) for i in np.nonzero(g_values >= -tol)[0])


def check_strong_regularity(
    nlp: ParametricNLP, sol: "KKTSolution", p, tol: float = REGULARITY_TOL
) -> RegularityReport:
    """Evaluate conditions (a)-(d) for strong regularity at sol.

    (a) LICQ via the smallest singular value of the stacked active
    constraint gradients, (b) the KKT residuals, (c) min_i(mu_i - G_i) > tol
    over all inequality rows, (d) smallest eigenvalue of the Lagrangian
    Hessian projected onto the critical cone's null-space basis.
    """
    z, lam, mu = sol.z_star, sol.lambda_star, sol.mu_star
    g_values = nlp.eval_ineq(z, p)
    act = active_set(g_values, mu)

    HJ = nlp.jac_eq_z(z, p)
    GJ = nlp.jac_ineq_z(z, p)
    stacked = np.vstack([HJ, GJ[list(act)]]) if act else HJ
    n_rows = stacked.shape[0]
    if n_rows == 0:
        licq_ok, sigma_min = True, np.inf
    elif n_rows > nlp.dim_z:
        licq_ok, sigma_min = False, 0.0
    else:
        sigma_min = float(np.linalg.svd(stacked, compute_uv=False)[-1])
        licq_ok = sigma_min > tol

    stat = float(np.abs(nlp.lagrangian_grad(z, p, lam, mu)).max()) if nlp.dim_z else 0.0
    h_values = nlp.eval_eq(z, p)
    feas = 0.0
    if h_values.size:
        feas = float(np.abs(h_values).max())
    if g_values.size:
        feas = max(feas, float(np.maximum(g_values, 0.0).max()))
    comp = float(np.abs(mu * g_values).max()) if g_values.size else 0.0
    kkt_ok = (
        stat <= tol
        and feas <= tol
        and comp <= tol
        and (mu.min() if mu.size else 0.0) >= -tol
    )

    margin = float((mu - g_values).min()) if g_values.size else np.inf
    strict_ok = margin > tol

    Hzz = nlp.hess_zz(z, p, lam, mu)
    if n_rows == 0:
        basis = np.eye(nlp.dim_z)
    else:
        basis = sla.null_space(stacked)
    if basis.shape[1] == 0:
        so_ok, eigmin = True, np.inf
    else:
        red = basis.T @ Hzz @ basis
        eigmin = float(np.linalg.eigvalsh(0.5 * (red + red.T))[0])
        so_ok = eigmin > tol

    return RegularityReport(
        licq_ok=licq_ok,
        licq_sigma_min=sigma_min,
        kkt_ok=bool(kkt_ok),
        kkt_residual=stat,
        strict_complementarity_ok=bool(strict_ok),
        strict_complementarity_margin=margin,
        second_order_ok=bool(so_ok),
        second_order_eigmin=eigmin,
    )


def _constraint_violation(h_values, g_values):
    v = 0.0
    if h_values.size:
        v += float(np.abs(h_values).sum())
    if g_values.size:
        v += float(np.maximum(g_values, 0.0).sum())
    return v


def _damped_bfgs_update(B, s, y):
    """Powell-damped BFGS; keeps B positive definite."""
    sBs = s @ B @ s
    sy = s @ y
    if sBs <= 0.0:
        return B
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * (B @ s)
        sy = s @ y
    if sy <= 1e-14 * max(1.0, sBs):
        return B
    Bs = B @ s
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def solve(
    nlp: ParametricNLP,
    p,
    z0,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITERATIONS,
    with_regularity: bool = True,
) -> KKTSolution:
    """Line-search SQP to a KKT point with residuals <= tol.

    Raises MaxIterations when the budget is exhausted, QPInfeasible when a
    subproblem has inconsistent linearized constraints, Degenerate when the
    multiplier estimates blow up.
    """
    p = np.asarray(p, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (nlp.dim_z,):
        raise ValueError(f"z0 has shape {z.shape}, expected ({nlp.dim_z},)")
    lam = np.zeros(nlp.n_eq)
    mu = np.zeros(nlp.n_ineq)
    nu = 1.0
    B = np.eye(nlp.dim_z)
    grad_L_prev = None
    z_prev = None
    comp_tol = max(10.0 * tol, 1e-10)
    iterations = 0

    for _ in range(max_iter):
        fval = float(nlp.objective(z, p))
        grad = nlp.grad(z, p)
        h_values = nlp.eval_eq(z, p)
        g_values = nlp.eval_ineq(z, p)
        HJ = nlp.jac_eq_z(z, p)
        GJ = nlp.jac_ineq_z(z, p)

        grad_L = grad.copy()
        if nlp.n_eq:
            grad_L += HJ.T @ lam
        if nlp.n_ineq:
            grad_L += GJ.T @ mu
        stat = float(np.abs(grad_L).max()) if grad_L.size else 0.0
        feas = 0.0
        if h_values.size:
            feas = float(np.abs(h_values).max())
        if g_values.size:
            feas = max(feas, float(np.maximum(g_values, 0.0).max()))
        comp = float(np.abs(mu * g_values).max()) if g_values.size else 0.0

        if stat <= tol and feas <= tol and comp <= comp_tol:
            break

        if nlp.has_exact_hessian:
            B = nlp.hess_zz(z, p, lam, mu)
        elif grad_L_prev is not None:
            s = z - z_prev
            y = nlp.lagrangian_grad(z, p, lam, mu) - grad_L_prev
            B = _damped_bfgs_update(B, s, y)

        # Nonconvex B can send the QP to a useless far-away stationary point;
        # when the line search balks, re-solve with stronger proximal damping
        # rather than adopting that step's multipliers.
        shift = 0.0
        b_scale = max(1.0, float(np.abs(B).max()))
        qp = None
        alpha = 0.0
        for _attempt in range(9):
            try:
                qp = solve_qp(B, grad, HJ, -h_values, GJ, -g_values, min_shift=shift)
            except QPInfeasible:
                raise
            except RuntimeError:
                shift = max(16.0 * shift, 1e-8 * b_scale)
                continue
            mult_scale = max(
                np.abs(qp.lam).max() if qp.lam.size else 0.0,
                np.abs(qp.mu).max() if qp.mu.size else 0.0,
            )
            if not np.isfinite(mult_scale) or mult_scale > MULTIPLIER_LIMIT:
                raise Degenerate("multiplier estimate unbounded in QP subproblem")

            d = qp.d
            nu_try = max(nu, 1.1 * mult_scale + 1e-4)
            viol0 = _constraint_violation(h_values, g_values)
            phi0 = fval + nu_try * viol0
            dphi = float(grad @ d) - nu_try * viol0
            alpha = 1.0
            accepted = False
            while alpha >= 1e-12:
                z_try = z + alpha * d
                phi = float(nlp.objective(z_try, p)) + nu_try * _constraint_violation(
                    nlp.eval_eq(z_try, p), nlp.eval_ineq(z_try, p)
                )
                if phi <= phi0 + 1e-4 * alpha * dphi + 1e-14 * abs(phi0):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted and alpha >= 2.0 ** -14:
                nu = nu_try
                break
            shift = max(16.0 * shift, 1e-8 * b_scale)
        else:
            raise MaxIterations("line search failed to make progress")

        if nlp.has_exact_hessian is False:
            grad_L_prev = nlp.lagrangian_grad(z, p, qp.lam, qp.mu)
            z_prev = z.copy()

        z = z + alpha * d
        lam, mu = qp.lam.copy(), qp.mu.copy()
        iterations += 1
    else:
        raise MaxIterations(f"no convergence within {max_iter} iterations")

    g_values = nlp.eval_ineq(z, p)
    sol = KKTSolution(
        z_star=z,
        mu_star=mu,
        lambda_star=lam,
        active_set=active_set(g_values, mu),
        kkt_residual=stat,
        feasibility=feas,
        complementarity=comp,
        objective_value=float(nlp.objective(z, p)),
        iterations=iterations,
        regularity=None,
    )
    if with_regularity:
        sol.regularity = check_strong_regularity(nlp, sol, p)
        if not sol.regularity.strongly_regular:
            logger.debug("solution not strongly regular: %s", sol.regularity)
    return sol
