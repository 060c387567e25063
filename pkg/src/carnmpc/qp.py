"""Dense quadratic programming by a null-space primal active-set method.

Solves
    minimize   0.5 d' B d + g' d
    subject to A d  = b
               C d <= c

B must be symmetric but need not be convex: each working-set solve adds the
smallest diagonal shift that makes the Hessian positive definite on the
current face's tangent space, so steps stay well defined while a zero step
still certifies exact stationarity of the unshifted problem on that face.
In particular, when B is positive definite on the critical cone at the
answer (the case this package cares about), the final step carries no shift
and the returned point, working set and multipliers are exact up to
linear-solve precision.  Equalities are eliminated exactly through a
null-space basis; phase 1 uses an LP over the null-space coordinates when
the particular equality solution is not inequality-feasible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog


def _solve_or_lstsq(K, rhs, assume_a):
    """Direct symmetric solve; min-norm fallback on singular or
    ill-conditioned systems (degenerate working sets)."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            return sla.solve(K, rhs, assume_a=assume_a)
    except (np.linalg.LinAlgError, sla.LinAlgWarning):
        return np.linalg.lstsq(K, rhs, rcond=None)[0]

__all__ = ["QPInfeasible", "QPResult", "solve_qp"]


class QPInfeasible(RuntimeError):
    """The constraint system A d = b, C d <= c has no solution."""


@dataclass
class QPResult:
    d: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    working_set: tuple
    iterations: int
    regularization: float


def _feasible_reduced_point(R: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Find y with R y <= r (within LP tolerance) or raise QPInfeasible."""
    m, k = R.shape
    if m == 0 or np.all(-r <= 1e-10):
        return np.zeros(k)
    if np.all(-r <= 1e-6):
        # near-feasible start: exact projection beats an LP both in accuracy
        # (no solver tolerance residue) and in cost
        y = np.zeros(k)
        for _ in range(8):
            viol = R @ y - r
            bad = viol > 0.0
            if not np.any(bad):
                return y
            dy, *_ = np.linalg.lstsq(R[bad], -viol[bad], rcond=None)
            y = y + dy
    # min sum(s)  s.t.  R y - s <= r,  s >= 0
    c_lp = np.concatenate([np.zeros(k), np.ones(m)])
    A_ub = np.hstack([R, -np.eye(m)])
    bounds = [(None, None)] * k + [(0, None)] * m
    res = linprog(c_lp, A_ub=A_ub, b_ub=r, bounds=bounds, method="highs")
    scale = max(1.0, np.abs(r).max())
    if not res.success or res.fun > 1e-7 * scale:
        raise QPInfeasible("phase-1 LP found no feasible point")
    y = res.x[:k]
    # polish away LP-tolerance violations of the tight rows
    for _ in range(3):
        viol = R @ y - r
        bad = viol > 0.0
        if not np.any(bad):
            break
        dy, *_ = np.linalg.lstsq(R[bad], -viol[bad], rcond=None)
        y = y + dy
    return y


def _working_kkt_step(M, q, R, r, y, work, floor, min_shift):
    """Newton-KKT step on the working set's face; returns (dy, mu_w, shift).

    The gradient is that of the true model; the Hessian gets the smallest
    diagonal shift making it positive definite (eigenvalues >= floor) on the
    face's tangent space, but never less than min_shift.  The step restores
    the face exactly (R_w (y+dy) = r_w), so rows seeded with tiny phase-1
    violations heal instead of persisting.  A zero step certifies
    stationarity of the unshifted problem on the face.
    """
    k = M.shape[0]
    nw = len(work)
    grad = M @ y + q
    if nw == 0:
        eigmin = float(np.linalg.eigvalsh(M)[0])
        shift = max(min_shift, floor - eigmin, 0.0)
        Md = M + shift * np.eye(k) if shift else M
        return _solve_or_lstsq(Md, -grad, "pos"), np.empty(0), shift
    Rw = R[work]
    basis = sla.null_space(Rw)
    shift = min_shift
    if basis.shape[1]:
        red = basis.T @ M @ basis
        eigmin = float(np.linalg.eigvalsh(0.5 * (red + red.T))[0])
        shift = max(min_shift, floor - eigmin, 0.0)
    Md = M + shift * np.eye(k) if shift else M
    K = np.zeros((k + nw, k + nw))
    K[:k, :k] = Md
    K[:k, k:] = Rw.T
    K[k:, :k] = Rw
    full_rhs = np.concatenate([-grad, r[work] - Rw @ y])
    sol = _solve_or_lstsq(K, full_rhs, "sym")
    return sol[:k], sol[k:], shift


def solve_qp(B, g, A=None, b=None, C=None, c=None, *, max_iter=None, min_shift=0.0):
    """Solve the QP; returns a QPResult with exact working set and multipliers.

    Raises QPInfeasible when the constraints are inconsistent.  Multipliers
    follow the convention L = 0.5 d'Bd + g'd + lam'(Ad-b) + mu'(Cd-c) with
    mu >= 0 at the solution.  ``min_shift`` forces at least that much
    diagonal convexification in every face solve (a proximal damping knob
    for nonconvex B); the working set starts from the rows already active at
    the phase-1 point, so a start near a stationary point terminates on its
    face instead of wandering across the nonconvex model.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    B = np.asarray(B, dtype=float)
    has_eq = A is not None and np.size(A) > 0
    has_ineq = C is not None and np.size(C) > 0
    A = np.asarray(A, dtype=float).reshape(-1, n) if has_eq else np.zeros((0, n))
    b = np.asarray(b, dtype=float).ravel() if has_eq else np.zeros(0)
    C = np.asarray(C, dtype=float).reshape(-1, n) if has_ineq else np.zeros((0, n))
    c = np.asarray(c, dtype=float).ravel() if has_ineq else np.zeros(0)
    m_i = C.shape[0]

    if has_eq:
        d0, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.abs(A @ d0 - b).max() > 1e-8 * (1.0 + np.abs(b).max()):
            raise QPInfeasible("equality constraints are inconsistent")
        Z = sla.null_space(A)
    else:
        d0 = np.zeros(n)
        Z = np.eye(n)
    k = Z.shape[1]

    if k == 0:
        # Fully determined by the equalities.
        if m_i and (C @ d0 - c).max() > 1e-8 * (1.0 + np.abs(c).max()):
            raise QPInfeasible("equalities violate an inequality")
        resid = B @ d0 + g
        mults, *_ = np.linalg.lstsq(
            np.hstack([A.T, C.T]) if m_i else A.T, -resid, rcond=None
        )
        lam = mults[: A.shape[0]]
        mu = np.maximum(mults[A.shape[0] :], 0.0) if m_i else np.zeros(0)
        return QPResult(d0, lam, mu, (), 0, 0.0)

    M = Z.T @ B @ Z
    M = 0.5 * (M + M.T)
    floor = 1e-9 * max(1.0, float(np.abs(M).max()))
    q = Z.T @ (B @ d0 + g)
    R = C @ Z
    r = c - C @ d0

    y = _feasible_reduced_point(R, r)
    slack0 = r - R @ y if m_i else np.zeros(0)
    work: list[int] = [
        int(i) for i in np.nonzero(slack0 <= 1e-9 * (1.0 + np.abs(r)))[0]
    ]
    mu_w = np.empty(0)
    if max_iter is None:
        max_iter = 10 * (m_i + k) + 30

    it = 0
    shift_max = 0.0
    while it < max_iter:
        it += 1
        dy, mu_w, shift = _working_kkt_step(M, q, R, r, y, work, floor, min_shift)
        shift_max = max(shift_max, shift)
        if np.abs(dy).max() <= 1e-12 * (1.0 + np.abs(y).max()):
            if mu_w.size == 0 or mu_w.min() >= -1e-10:
                break
            # release the most negative multiplier
            work.pop(int(np.argmin(mu_w)))
            continue
        alpha = 1.0
        blocker = -1
        slack = r - R @ y
        direction = R @ dy
        dir_tol = 1e-13 * max(1.0, np.abs(dy).max())
        in_work = np.zeros(m_i, dtype=bool)
        for i in work:
            in_work[i] = True
        for i in range(m_i):
            if in_work[i] or direction[i] <= dir_tol:
                continue
            a_i = max(slack[i], 0.0) / direction[i]
            if a_i < alpha - 1e-15:
                alpha = a_i
                blocker = i
        y = y + alpha * dy
        if blocker >= 0:
            work.append(blocker)
    else:
        raise RuntimeError("active-set iteration limit exceeded")

    d = d0 + Z @ y
    mu = np.zeros(m_i)
    for idx, i in enumerate(work):
        mu[i] = max(mu_w[idx], 0.0) if mu_w.size else 0.0
    if has_eq:
        # at termination the face step was zero, so the stationarity residual
        # of the unshifted problem lies in range(A') exactly
        resid = B @ d + g + C.T @ mu
        lam, *_ = np.linalg.lstsq(A.T, -resid, rcond=None)
    else:
        lam = np.zeros(0)
    return QPResult(d, lam, mu, tuple(sorted(work)), it, shift_max)
