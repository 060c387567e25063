"""Low-level numerical kernels for the kinematic car model.

Everything here operates on raw float64 arrays: state ``s = (x, y, psi, v,
delta)``, control ``u = (u1, u2)``, wheelbase ``ell`` and step size ``h`` as
scalars.  The kernels are compiled with numba when it is importable; setting
``CARNMPC_PURE_NUMPY=1`` (or running without numba installed) selects plain
numpy versions of the same code paths.  ``benchmarks/bench_kernels.py``
compares the two.

Derivatives are propagated through the RK4 recursion in forward mode over the
combined variable ``w = (s, u)`` (7 components), so the Jacobians and the
second-order curvature are exact for the discrete step, not approximations of
the continuous flow.  The curvature propagation hard-codes that the car
right-hand side is affine in the control and has no state-control cross
terms.
"""

from __future__ import annotations

import os

import numpy as np

if os.environ.get("CARNMPC_PURE_NUMPY"):
    HAVE_NUMBA = False
else:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised via CARNMPC_PURE_NUMPY
        HAVE_NUMBA = False

if not HAVE_NUMBA:

    def njit(*args, **kwargs):
        """Identity stand-in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


NX = 5
NU = 2
NW = NX + NU


@njit(cache=True)
def car_rhs(s, u, ell):
    """Continuous-time right-hand side (x', y', psi', v', delta')."""
    out = np.empty(NX)
    out[0] = s[3] * np.cos(s[2])
    out[1] = s[3] * np.sin(s[2])
    out[2] = s[3] * np.tan(s[4]) / ell
    out[3] = u[0]
    out[4] = u[1]
    return out


@njit(cache=True)
def car_rhs_jac_s(s, ell):
    """d(rhs)/ds as a 5x5 matrix."""
    A = np.zeros((NX, NX))
    psi, v, delta = s[2], s[3], s[4]
    t = np.tan(delta)
    A[0, 2] = -v * np.sin(psi)
    A[0, 3] = np.cos(psi)
    A[1, 2] = v * np.cos(psi)
    A[1, 3] = np.sin(psi)
    A[2, 3] = t / ell
    A[2, 4] = v * (1.0 + t * t) / ell
    return A


@njit(cache=True)
def car_rhs_jac(s, ell):
    """d(rhs)/dw as a 5x7 matrix; the control block is constant."""
    J = np.zeros((NX, NW))
    J[:, :NX] = car_rhs_jac_s(s, ell)
    J[3, 5] = 1.0
    J[4, 6] = 1.0
    return J


@njit(cache=True)
def rk4_step(s, u, ell, h):
    """One classical Runge-Kutta step with the control held constant."""
    k1 = car_rhs(s, u, ell)
    k2 = car_rhs(s + 0.5 * h * k1, u, ell)
    k3 = car_rhs(s + 0.5 * h * k2, u, ell)
    k4 = car_rhs(s + h * k3, u, ell)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def rk4_step_jac(s, u, ell, h):
    """Exact Jacobian of rk4_step w.r.t. w = (s, u), shape 5x7.

    Forward-mode sweep: D_i tracks d(stage state)/dw, and each stage slope
    contributes A(s_i) @ D_i plus the constant control block.
    """
    D1 = np.zeros((NX, NW))
    for i in range(NX):
        D1[i, i] = 1.0

    k1 = car_rhs(s, u, ell)
    Dk1 = car_rhs_jac_s(s, ell) @ D1
    Dk1[3, 5] = 1.0
    Dk1[4, 6] = 1.0

    s2 = s + 0.5 * h * k1
    D2 = D1 + 0.5 * h * Dk1
    k2 = car_rhs(s2, u, ell)
    Dk2 = car_rhs_jac_s(s2, ell) @ D2
    Dk2[3, 5] += 1.0
    Dk2[4, 6] += 1.0

    s3 = s + 0.5 * h * k2
    D3 = D1 + 0.5 * h * Dk2
    k3 = car_rhs(s3, u, ell)
    Dk3 = car_rhs_jac_s(s3, ell) @ D3
    Dk3[3, 5] += 1.0
    Dk3[4, 6] += 1.0

    s4 = s + h * k3
    D4 = D1 + h * Dk3
    Dk4 = car_rhs_jac_s(s4, ell) @ D4
    Dk4[3, 5] += 1.0
    Dk4[4, 6] += 1.0

    return D1 + (h / 6.0) * (Dk1 + 2.0 * Dk2 + 2.0 * Dk3 + Dk4)


@njit(cache=True)
def _stage_curvature(s, D, ell):
    """d2(rhs)/dw2 contracted with the stage sensitivity D, shape 5x7x7.

    Only three rhs components are nonlinear and all their second derivatives
    involve state pairs (psi,psi), (psi,v), (v,delta), (delta,delta).
    """
    psi, v, delta = s[2], s[3], s[4]
    dpsi = D[2]
    dv = D[3]
    ddel = D[4]
    C = np.zeros((NX, NW, NW))
    pp = np.outer(dpsi, dpsi)
    pv = np.outer(dpsi, dv) + np.outer(dv, dpsi)
    C[0] = -v * np.cos(psi) * pp - np.sin(psi) * pv
    C[1] = -v * np.sin(psi) * pp + np.cos(psi) * pv
    t = np.tan(delta)
    sec2 = 1.0 + t * t
    C[2] = (sec2 / ell) * (np.outer(dv, ddel) + np.outer(ddel, dv))
    C[2] += (2.0 * v * t * sec2 / ell) * np.outer(ddel, ddel)
    return C


@njit(cache=True)
def _push_tensor(A, T):
    """A[a,b] * T[b] summed over b, for 5x5 A and 5x7x7 T."""
    out = np.zeros((NX, NW, NW))
    for a in range(NX):
        for b in range(NX):
            c = A[a, b]
            if c != 0.0:
                out[a] += c * T[b]
    return out


@njit(cache=True)
def rk4_step_derivs(s, u, ell, h):
    """Step value, exact 5x7 Jacobian and exact 5x7x7 second derivative."""
    D1 = np.zeros((NX, NW))
    for i in range(NX):
        D1[i, i] = 1.0

    k1 = car_rhs(s, u, ell)
    A1 = car_rhs_jac_s(s, ell)
    Dk1 = A1 @ D1
    Dk1[3, 5] = 1.0
    Dk1[4, 6] = 1.0
    Tk1 = _stage_curvature(s, D1, ell)

    s2 = s + 0.5 * h * k1
    D2 = D1 + 0.5 * h * Dk1
    T2 = 0.5 * h * Tk1
    k2 = car_rhs(s2, u, ell)
    A2 = car_rhs_jac_s(s2, ell)
    Dk2 = A2 @ D2
    Dk2[3, 5] += 1.0
    Dk2[4, 6] += 1.0
    Tk2 = _stage_curvature(s2, D2, ell) + _push_tensor(A2, T2)

    s3 = s + 0.5 * h * k2
    D3 = D1 + 0.5 * h * Dk2
    T3 = 0.5 * h * Tk2
    k3 = car_rhs(s3, u, ell)
    A3 = car_rhs_jac_s(s3, ell)
    Dk3 = A3 @ D3
    Dk3[3, 5] += 1.0
    Dk3[4, 6] += 1.0
    Tk3 = _stage_curvature(s3, D3, ell) + _push_tensor(A3, T3)

    s4 = s + h * k3
    D4 = D1 + h * Dk3
    T4 = h * Tk3
    A4 = car_rhs_jac_s(s4, ell)
    Dk4 = A4 @ D4
    Dk4[3, 5] += 1.0
    Dk4[4, 6] += 1.0
    Tk4 = _stage_curvature(s4, D4, ell) + _push_tensor(A4, T4)

    k4 = car_rhs(s4, u, ell)
    snext = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    D = D1 + (h / 6.0) * (Dk1 + 2.0 * Dk2 + 2.0 * Dk3 + Dk4)
    T = (h / 6.0) * (Tk1 + 2.0 * Tk2 + 2.0 * Tk3 + Tk4)
    return snext, D, T


@njit(cache=True)
def rk4_step_curvature(s, u, ell, h, lam):
    """lam-contracted second derivative sum_a lam[a] * d2(step_a)/dw2, 7x7."""
    _, _, T = rk4_step_derivs(s, u, ell, h)
    out = np.zeros((NW, NW))
    for a in range(NX):
        c = lam[a]
        if c != 0.0:
            out += c * T[a]
    return out


def warmup():
    """Trigger JIT compilation of all kernels (no-op on the numpy path)."""
    s = np.array([0.0, 0.0, 0.1, 10.0, 0.05])
    u = np.array([0.5, 0.1])
    car_rhs(s, u, 4.0)
    car_rhs_jac(s, 4.0)
    rk4_step(s, u, 4.0, 0.3)
    rk4_step_jac(s, u, 4.0, 0.3)
    rk4_step_derivs(s, u, 4.0, 0.3)
    rk4_step_curvature(s, u, 4.0, 0.3, s)
