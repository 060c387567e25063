"""Kinematic car model: continuous dynamics, RK4 one-step map, Jacobians.

The model is the rear-axle kinematic single track

    x' = v cos(psi),  y' = v sin(psi),  psi' = (v / l) tan(delta),
    v' = u1,          delta' = u2,

discretized by one classical RK4 step of length ``h`` with the control held
constant over the interval, so the discrete map has the form
f(x, u) = x + h * Phi(x, u, h).  Bounds on states and controls are not
enforced here; they belong to the optimal control problem.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from . import kernels

__all__ = [
    "AssumptionViolated",
    "CarControl",
    "CarParams",
    "CarState",
    "CarStateDerivative",
    "DomainError",
    "KinematicCarModel",
    "LinearModel",
    "ode_rhs",
    "step",
    "step_jacobian_u",
    "step_jacobian_x",
]

logger = logging.getLogger(__name__)

# tan(delta) blows up at pi/2; reject well before that, far outside the
# +-0.5 rad steering constraint.
DELTA_DOMAIN_LIMIT = 1.4

# Condition number at which a step Jacobian counts as singular to working
# precision (its inverse is required by the sensitivity shift).
SINGULAR_CONDITION_LIMIT = 1e12


class DomainError(ValueError):
    """Dynamics evaluated outside the model's valid domain."""


class AssumptionViolated(RuntimeError):
    """A step Jacobian required to be invertible is numerically singular."""


class CarState(NamedTuple):
    x_pos: float
    y_pos: float
    psi: float
    v: float
    delta: float

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "CarState":
        return cls(*(float(a) for a in arr))


class CarStateDerivative(NamedTuple):
    x_pos_dot: float
    y_pos_dot: float
    psi_dot: float
    v_dot: float
    delta_dot: float

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class CarControl(NamedTuple):
    u1: float
    u2: float

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    @classmethod
    def from_array(cls, arr) -> "CarControl":
        return cls(float(arr[0]), float(arr[1]))


class CarParams(NamedTuple):
    wheelbase_l: float = 4.0
    step_h: float = 0.3


def _check_domain(s: np.ndarray, u: np.ndarray) -> None:
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
        raise DomainError("non-finite state or control")
    if abs(s[4]) >= DELTA_DOMAIN_LIMIT:
        raise DomainError(
            f"steering angle {s[4]:.3f} rad too close to the tan singularity"
        )


def _check_params(p: CarParams) -> None:
    if p.wheelbase_l <= 0.0:
        raise DomainError("wheelbase must be positive")
    if p.step_h <= 0.0:
        raise DomainError("step size must be positive")


def ode_rhs(s: CarState, c: CarControl, p: CarParams = CarParams()) -> CarStateDerivative:
    """Continuous-time state derivative at (s, c)."""
    sa, ua = np.asarray(s, dtype=float), np.asarray(c, dtype=float)
    if p.wheelbase_l <= 0.0:
        raise DomainError("wheelbase must be positive")
    _check_domain(sa, ua)
    return CarStateDerivative(*kernels.car_rhs(sa, ua, p.wheelbase_l))


def step(s: CarState, c: CarControl, p: CarParams = CarParams()) -> CarState:
    """One RK4 step of length p.step_h with zero-order-hold control."""
    sa, ua = np.asarray(s, dtype=float), np.asarray(c, dtype=float)
    _check_params(p)
    _check_domain(sa, ua)
    out = kernels.rk4_step(sa, ua, p.wheelbase_l, p.step_h)
    if not np.all(np.isfinite(out)):
        raise DomainError("step produced a non-finite state")
    return CarState.from_array(out)


def _step_jac(s, c, p) -> np.ndarray:
    sa, ua = np.asarray(s, dtype=float), np.asarray(c, dtype=float)
    _check_params(p)
    _check_domain(sa, ua)
    return kernels.rk4_step_jac(sa, ua, p.wheelbase_l, p.step_h)


def step_jacobian_x(s: CarState, c: CarControl, p: CarParams = CarParams()) -> np.ndarray:
    """Exact 5x5 Jacobian of ``step`` w.r.t. the state.

    Raises AssumptionViolated when the Jacobian is singular to working
    precision; callers relying on its inverse must then fall back to
    re-optimization.
    """
    J = _step_jac(s, c, p)[:, : kernels.NX]
    cond = np.linalg.cond(J)
    logger.debug("step Jacobian condition estimate %.3e", cond)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION_LIMIT:
        raise AssumptionViolated(
            f"state Jacobian singular to working precision (cond {cond:.3e})"
        )
    return J


def step_jacobian_u(s: CarState, c: CarControl, p: CarParams = CarParams()) -> np.ndarray:
    """Exact 5x2 Jacobian of ``step`` w.r.t. the control."""
    return _step_jac(s, c, p)[:, kernels.NX :]


class KinematicCarModel:
    """Array-facing discrete model used by the OCP transcription.

    Exposes the step map, its exact Jacobians and the multiplier-contracted
    second derivative over the combined variable w = (state, control).
    """

    def __init__(self, params: CarParams = CarParams()):
        _check_params(params)
        self.params = params
        self.n_x = kernels.NX
        self.n_u = kernels.NU

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return kernels.rk4_step(
            np.asarray(x, float), np.asarray(u, float),
            self.params.wheelbase_l, self.params.step_h,
        )

    def jac(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Full 5x7 step Jacobian w.r.t. (x, u)."""
        return kernels.rk4_step_jac(
            np.asarray(x, float), np.asarray(u, float),
            self.params.wheelbase_l, self.params.step_h,
        )

    def jac_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.jac(x, u)[:, : self.n_x]

    def jac_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.jac(x, u)[:, self.n_x :]

    def curvature(self, x: np.ndarray, u: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """sum_a lam[a] * d2 step_a / dw2, shape 7x7."""
        return kernels.rk4_step_curvature(
            np.asarray(x, float), np.asarray(u, float),
            self.params.wheelbase_l, self.params.step_h, np.asarray(lam, float),
        )


class LinearModel:
    """Linear discrete model x+ = A x + B u (test stub; zero curvature)."""

    def __init__(self, A: np.ndarray, B: np.ndarray):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n_x = self.A.shape[0]
        self.n_u = self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def jac(self, x, u):
        return np.hstack([self.A, self.B])

    def jac_x(self, x, u):
        return self.A.copy()

    def jac_u(self, x, u):
        return self.B.copy()

    def curvature(self, x, u, lam):
        n = self.n_x + self.n_u
        return np.zeros((n, n))
