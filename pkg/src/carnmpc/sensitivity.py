"""Parametric sensitivities of KKT solutions and shifted control gains.

Given a strongly regular solution of NLP(p), the KKT conditions define the
solution implicitly as a differentiable function of p.  Differentiating them
at (z*, mu*, lambda*) gives one linear system with a common coefficient
matrix

    [ d2L/dz2         dG/dz^T    dH/dz^T ] [dz  ]     [ d2L/dzdp       ]
    [ diag(mu) dG/dz  diag(G)    0       ] [dmu ] = - [ diag(mu) dG/dp ]
    [ dH/dz           0          0       ] [dlam]     [ dH/dp          ]

solved for all parameter directions at once (`kkt_sensitivity`).  The
differentials feed two consumers:

* `taylor_update` evaluates the first-order solution map
  z(p) ~ z* + dz_dp (p - p_hat) inside a trust region measured in a scaled
  parameter norm;
* `shifted_sensitivities` converts them into per-shift feedback gains S_j
  without solving any further KKT systems.  The j-step tail of the solved
  problem is itself a solved problem anchored at the predicted state x_j, so
  differentiating u_j(p) = S_j(x_j(p)) through the anchor gives
  S_j = U_j X_j^{-1}, where U_j is the u_j block of dz_dp and X_j is the
  anchor-state sensitivity accumulated by X_j = F_x X_{j-1} + F_u U_{j-1},
  X_0 = I, with F the step Jacobian along the solution trajectory.

Everything here is a pure function of immutable inputs, so calls may run on
a worker thread while the caller advances a simulation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .nlp import KKTSolution, ParametricNLP, check_strong_regularity

__all__ = [
    "AssumptionViolated",
    "NotStronglyRegular",
    "SensitivityDifferentials",
    "SensitivityError",
    "ShiftedControlSensitivity",
    "SingularKKTMatrix",
    "TrustRadiusExceeded",
    "bound_range_scale",
    "kkt_sensitivity",
    "shifted_sensitivities",
    "taylor_update",
    "taylor_update_duals",
]

DEFAULT_TRUST_RADIUS = 0.5
RESIDUAL_TOL = 1e-10
JACOBIAN_COND_LIMIT = 1e12


class SensitivityError(RuntimeError):
    """Base class: sensitivity unavailable, caller must re-optimize."""


class NotStronglyRegular(SensitivityError):
    """A strong-regularity flag failed; the solution map need not be
    differentiable here."""


class SingularKKTMatrix(SensitivityError):
    """The sensitivity system could not be solved to tolerance."""


class TrustRadiusExceeded(SensitivityError):
    """Requested parameter lies outside the linearization's trust region."""


class AssumptionViolated(SensitivityError):
    """A step Jacobian (or accumulated chain map) is numerically singular."""


@dataclass(frozen=True)
class SensitivityDifferentials:
    """Derivatives of (z*, mu*, lambda*) with respect to the parameter.

    Rows of ``dmu_dp`` for strongly inactive constraints and rows of
    ``dz_dp`` for variables pinned by active simple bounds are numerically
    zero.  ``p_scale`` defines the norm ||dp / p_scale|| used by the trust
    region; nominal primal and duals are retained so updates need only this
    object.
    """

    dz_dp: np.ndarray
    dmu_dp: np.ndarray
    dlambda_dp: np.ndarray
    nominal_p: np.ndarray
    nominal_z: np.ndarray
    nominal_mu: np.ndarray
    nominal_lambda: np.ndarray
    trust_radius: float
    p_scale: np.ndarray

    def scaled_step(self, p) -> float:
        dp = np.asarray(p, float) - self.nominal_p
        return float(np.linalg.norm(dp / self.p_scale))


@dataclass(frozen=True)
class ShiftedControlSensitivity:
    """Per-shift control gains derived from one set of differentials.

    ``gains[j-1]`` is S_j (n_u x n_x): the derivative of the j-th planned
    control with respect to the j-th predicted state, i.e. the first-control
    sensitivity of the j-step tail problem.  Only the gains are meant for
    online use; ``state_maps`` (the accumulated X_j) and ``tail_primal``
    (sensitivity of the entire tail decision vector to the tail anchor
    state, tail layout [x_{j+1}.., u_j..]) exist for verification and for
    warm-starting a fallback re-optimization.
    """

    gains: tuple
    state_maps: tuple
    tail_primal: tuple

    def __len__(self) -> int:
        return len(self.gains)


def bound_range_scale(lower, upper) -> np.ndarray:
    """Per-component scale from box-bound ranges; unbounded components
    scale by 1."""
    r = np.asarray(upper, float) - np.asarray(lower, float)
    return np.where(np.isfinite(r) & (r > 0.0), r, 1.0)


def kkt_sensitivity(
    nlp: ParametricNLP,
    sol: KKTSolution,
    p_hat,
    *,
    trust_radius: float = DEFAULT_TRUST_RADIUS,
    p_scale: Optional[np.ndarray] = None,
) -> SensitivityDifferentials:
    """Solve the KKT sensitivity system at a strongly regular solution.

    One dense LU factorization (the diag(mu) block makes the matrix
    nonsymmetric) is reused across all parameter columns; the solution is
    refined once and rejected if the relative residual stays above 1e-10.

    Raises NotStronglyRegular when any regularity flag fails (weakly active
    constraints land here via the strict-complementarity flag) and
    SingularKKTMatrix when the linear system is unusable.
    """
    p_hat = np.asarray(p_hat, float)
    report = sol.regularity
    if report is None:
        report = check_strong_regularity(nlp, sol, p_hat)
    if not report.strongly_regular:
        raise NotStronglyRegular(
            "sensitivity refused: licq=%s kkt=%s strict_comp=%s second_order=%s"
            % (
                report.licq_ok,
                report.kkt_ok,
                report.strict_complementarity_ok,
                report.second_order_ok,
            )
        )

    z, lam, mu = sol.z_star, sol.lambda_star, sol.mu_star
    nz, ni, ne = nlp.dim_z, nlp.n_ineq, nlp.n_eq
    g_values = nlp.eval_ineq(z, p_hat)
    GJ = nlp.jac_ineq_z(z, p_hat)
    HJ = nlp.jac_eq_z(z, p_hat)

    n = nz + ni + ne
    K = np.zeros((n, n))
    K[:nz, :nz] = nlp.hess_zz(z, p_hat, lam, mu)
    K[:nz, nz : nz + ni] = GJ.T
    K[:nz, nz + ni :] = HJ.T
    K[nz : nz + ni, :nz] = mu[:, None] * GJ
    K[nz : nz + ni, nz : nz + ni] = np.diag(g_values)
    K[nz + ni :, :nz] = HJ

    rhs = np.zeros((n, nlp.dim_p))
    rhs[:nz] = -nlp.hess_zp(z, p_hat, lam, mu)
    if ni:
        rhs[nz : nz + ni] = -(mu[:, None] * nlp.jac_ineq_p(z, p_hat))
    if ne:
        rhs[nz + ni :] = -nlp.jac_eq_p(z, p_hat)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            lu = sla.lu_factor(K)
            X = sla.lu_solve(lu, rhs)
            # one refinement step buys an order of magnitude on stiff KKT
            # matrices at negligible cost
            X += sla.lu_solve(lu, rhs - K @ X)
    except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
        raise SingularKKTMatrix(str(exc)) from exc

    residual = float(np.linalg.norm(K @ X - rhs))
    if not np.isfinite(residual) or residual > RESIDUAL_TOL * max(
        1.0, float(np.linalg.norm(rhs))
    ):
        raise SingularKKTMatrix(f"sensitivity solve residual {residual:.3e}")

    scale = np.ones(nlp.dim_p) if p_scale is None else np.asarray(p_scale, float)
    if scale.shape != (nlp.dim_p,) or np.any(scale <= 0.0):
        raise ValueError("p_scale must be positive with one entry per parameter")
    return SensitivityDifferentials(
        dz_dp=X[:nz],
        dmu_dp=X[nz : nz + ni],
        dlambda_dp=X[nz + ni :],
        nominal_p=p_hat.copy(),
        nominal_z=np.asarray(z, float).copy(),
        nominal_mu=np.asarray(mu, float).copy(),
        nominal_lambda=np.asarray(lam, float).copy(),
        trust_radius=float(trust_radius),
        p_scale=scale,
    )


def taylor_update(diff: SensitivityDifferentials, p) -> np.ndarray:
    """First-order estimate z* + dz_dp (p - p_hat) of the primal solution.

    Error is second order in the step; raises TrustRadiusExceeded when the
    scaled step leaves the trust region, in which case the caller should
    re-optimize (this estimate still makes a good initial guess).
    """
    p = np.asarray(p, float)
    step = diff.scaled_step(p)
    if step > diff.trust_radius:
        raise TrustRadiusExceeded(
            f"scaled step {step:.3g} exceeds trust radius {diff.trust_radius:.3g}"
        )
    return diff.nominal_z + diff.dz_dp @ (p - diff.nominal_p)


def taylor_update_duals(diff: SensitivityDifferentials, p):
    """First-order (mu, lambda) at p; mu is clamped at zero to stay dual
    feasible.  Same trust region as taylor_update."""
    p = np.asarray(p, float)
    step = diff.scaled_step(p)
    if step > diff.trust_radius:
        raise TrustRadiusExceeded(
            f"scaled step {step:.3g} exceeds trust radius {diff.trust_radius:.3g}"
        )
    dp = p - diff.nominal_p
    mu = np.maximum(diff.nominal_mu + diff.dmu_dp @ dp, 0.0)
    lam = diff.nominal_lambda + diff.dlambda_dp @ dp
    return mu, lam


def _certified_solve(M, rhs_t, what: str) -> np.ndarray:
    """solve(M^T, rhs_t)^T with finiteness and conditioning certification."""
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > JACOBIAN_COND_LIMIT:
        raise AssumptionViolated(f"{what} is numerically singular")
    try:
        out = np.linalg.solve(M.T, rhs_t).T
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolated(f"{what} is singular") from exc
    if not np.all(np.isfinite(out)):
        raise AssumptionViolated(f"{what} produced non-finite sensitivities")
    return out


def shifted_sensitivities(
    ocp_solution, diffs_at_k: SensitivityDifferentials, M: int
) -> ShiftedControlSensitivity:
    """Gains S_j, j = 1..M, from the differentials of one full-horizon solve.

    Builds the anchor-state chain X_j = F_x X_{j-1} + F_u U_{j-1} along the
    solved trajectory and returns S_j = U_j X_j^{-1} by linear solves (no
    explicit inverses).  Each step Jacobian F_x and each chain map must be
    certifiably nonsingular, otherwise AssumptionViolated tells the caller
    to fall back to re-optimization.
    """
    ocp = ocp_solution.ocp
    if getattr(ocp_solution, "relaxation_used", False):
        raise ValueError("relaxed solutions carry no usable sensitivities")
    model = ocp.model
    nx, nu, N = model.n_x, model.n_u, ocp.N
    if not 1 <= M <= N - 1:
        raise ValueError(f"shift count {M} outside [1, {N - 1}]")
    dz = np.asarray(diffs_at_k.dz_dp, float)
    n_z = N * (nx + nu)
    if dz.shape != (n_z, nx):
        raise ValueError(f"dz_dp has shape {dz.shape}, expected ({n_z}, {nx})")

    states = np.asarray(ocp_solution.states, float)
    controls = np.asarray(ocp_solution.controls, float)
    u_base = N * nx

    def u_block(j):
        return dz[u_base + j * nu : u_base + (j + 1) * nu]

    gains, state_maps, tails = [], [], []
    X = np.eye(nx)
    for j in range(1, M + 1):
        F = model.jac(states[j - 1], controls[j - 1])
        Fx, Fu = F[:, :nx], F[:, nx:]
        if not np.all(np.isfinite(Fx)) or np.linalg.cond(Fx) > JACOBIAN_COND_LIMIT:
            raise AssumptionViolated(f"step Jacobian at shift {j - 1} is singular")
        X = Fx @ X + Fu @ u_block(j - 1)
        gains.append(_certified_solve(X, u_block(j).T, f"chain map at shift {j}"))
        tail_rows = np.r_[j * nx : N * nx, u_base + j * nu : n_z]
        tails.append(_certified_solve(X, dz[tail_rows].T, f"chain map at shift {j}"))
        state_maps.append(X.copy())

    return ShiftedControlSensitivity(
        gains=tuple(gains), state_maps=tuple(state_maps), tail_primal=tuple(tails)
    )
