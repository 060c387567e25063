"""Closed-loop NMPC feedback schemes over a shared tracking OCP.

Four interchangeable strategies, all driving the same plant loop:

* ``classic``: solve the full-horizon OCP at every step, apply the first
  control.
* ``multistep``: solve at every M-th step only and play the planned controls
  open loop inside the shift.
* ``multistep-reopt``: like multistep, but when the measured state deviates
  from the plan, re-solve on the shrinking horizon [k+j, k+N] anchored at
  the measurement.
* ``multistep-sens``: like multistep, but correct the planned controls to
  first order, u = u_plan + S_j (x - x_plan), with gains prepared once per
  shift; deviations beyond a trust threshold trigger a shrinking-horizon
  re-solve seeded with the first-order update.

Plan states used for deviation tests are re-rolled through the model from
the planned controls, so with noise-free measurements the plant retraces
them bit for bit and the deviation is exactly zero; the solver's own state
trajectory differs from this rollout only by the converged defect residual.

The sensitivity pass of ``multistep-sens`` runs on a worker thread,
overlapping the plant step that applies the shift's first control, and is
joined before the next control decision.  Solver failures inside a shift
fall back to the stored plan and are logged; a failure with no plan to fall
back on aborts the run with the partial trace attached.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import KinematicCarModel
from .nlp import Degenerate, MaxIterations, QPInfeasible
from .ocp import OCPSolution, TrackingOCP, Transcription, _rollout, build_objective_weights, solve_ocp
from .reference import ReferenceTrajectory, window
from .sensitivity import (
    SensitivityError,
    ShiftedControlSensitivity,
    bound_range_scale,
    kkt_sensitivity,
    shifted_sensitivities,
)

__all__ = [
    "ACTIONS",
    "ClosedLoopError",
    "ClosedLoopTrace",
    "SCHEMES",
    "SchemeConfig",
    "StepRecord",
    "make_controller",
    "run_scheme",
]

logger = logging.getLogger(__name__)

SCHEME_CLASSIC = "classic"
SCHEME_MULTISTEP = "multistep"
SCHEME_MULTISTEP_REOPT = "multistep-reopt"
SCHEME_MULTISTEP_SENS = "multistep-sens"
SCHEMES = (
    SCHEME_CLASSIC,
    SCHEME_MULTISTEP,
    SCHEME_MULTISTEP_REOPT,
    SCHEME_MULTISTEP_SENS,
)

ACTION_SOLVE = "solve"
ACTION_REUSE = "reuse"
ACTION_REOPT = "reopt"
ACTION_SENS_UPDATE = "sens-update"
ACTION_FALLBACK = "fallback"
ACTIONS = (ACTION_SOLVE, ACTION_REUSE, ACTION_REOPT, ACTION_SENS_UPDATE, ACTION_FALLBACK)

# deviations below this scaled norm count as "measured equals predicted"
REOPT_DEVIATION_EPS = 1e-12

SOLVER_ERRORS = (MaxIterations, Degenerate, QPInfeasible)


@dataclass(frozen=True)
class SchemeConfig:
    """Scheme selection plus the knobs shared by the closed-loop drivers.

    ``trailing_gain`` keeps the sensitivity pass computing S_M, one more
    gain than the scheme ever applies (only S_1..S_{M-1} reach the plant);
    disable it to save that solve.
    """

    scheme: str
    N: int = 11
    M: int = 1
    reopt_on_deviation_only: bool = True
    sens_fallback_threshold: float = 0.5
    trailing_gain: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if not 1 <= self.M <= self.N:
            raise ValueError(f"control horizon M={self.M} outside [1, N={self.N}]")
        if self.scheme == SCHEME_CLASSIC and self.M != 1:
            raise ValueError("classic NMPC re-solves every step; M must be 1")
        if self.sens_fallback_threshold <= 0.0:
            raise ValueError("sens_fallback_threshold must be positive")


@dataclass(frozen=True)
class StepRecord:
    """One control decision.  ``kkt_residual`` and ``strongly_regular`` are
    populated only when the decision involved a solve."""

    k: int
    action: str
    measured_state: np.ndarray
    nominal_state: np.ndarray
    applied_control: np.ndarray
    deviation_norm: float
    kkt_residual: float = float("nan")
    strongly_regular: Optional[bool] = None
    wall_time: float = 0.0


@dataclass(frozen=True)
class ClosedLoopTrace:
    """Immutable record of one closed-loop run.

    ``states`` holds the plant trajectory at the decision times (steps+1
    rows, disturbances applied), ``controls`` what was applied over each
    interval.
    """

    config: SchemeConfig
    h: float
    states: np.ndarray
    controls: np.ndarray
    records: tuple

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.steps + 1)

    def count(self, action: str) -> int:
        return sum(1 for r in self.records if r.action == action)

    @property
    def full_solves(self) -> int:
        return self.count(ACTION_SOLVE)

    @property
    def reopt_solves(self) -> int:
        return self.count(ACTION_REOPT)

    @property
    def sens_updates(self) -> int:
        return self.count(ACTION_SENS_UPDATE)

    @property
    def fallbacks(self) -> int:
        return self.count(ACTION_FALLBACK)

    @property
    def reuses(self) -> int:
        return self.count(ACTION_REUSE)


class ClosedLoopError(RuntimeError):
    """Fatal failure during a run; ``trace`` holds the completed steps."""

    def __init__(self, message: str, trace: Optional[ClosedLoopTrace] = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class _Plan:
    """One committed solve: its solution, grid anchor, and the re-rolled
    open-loop trajectory the plant is expected to follow."""

    sol: OCPSolution
    k: int
    states: np.ndarray
    controls: np.ndarray
    gains: Optional[ShiftedControlSensitivity] = None
    gains_ok: bool = False


class _Controller:
    def __init__(self, config: SchemeConfig, reference: ReferenceTrajectory, model, V, W):
        self.cfg = config
        self.ref = reference
        self.model = model
        self.V = V
        self.W = W
        self.scale: Optional[np.ndarray] = None
        self.latest: Optional[_Plan] = None
        self.last_u: Optional[np.ndarray] = None

    # -- helpers -----------------------------------------------------------

    def _make_ocp(self, k: int, x, horizon: int) -> TrackingOCP:
        return TrackingOCP(
            k0=k,
            x0=x,
            N=horizon,
            reference_window=window(self.ref, k, horizon),
            V=self.V,
            W=self.W,
            model=self.model,
        )

    def _solve(self, k: int, x, horizon: int, warm: Optional[OCPSolution], z0=None) -> _Plan:
        ocp = self._make_ocp(k, x, horizon)
        if self.scale is None:
            self.scale = bound_range_scale(ocp.state_lower, ocp.state_upper)
        sol = solve_ocp(ocp, warm_start=warm, z0=z0)
        return _Plan(sol, k, _rollout(self.model, ocp.x0, sol.controls), sol.controls)

    def _deviation(self, x, nominal) -> float:
        if self.scale is None:
            return float(np.linalg.norm(x - nominal))
        return float(np.linalg.norm((x - nominal) / self.scale))

    def _clip(self, u, plan: _Plan) -> np.ndarray:
        ocp = plan.sol.ocp
        return np.clip(u, ocp.control_lower, ocp.control_upper)

    def _nominal(self, k: int, x) -> np.ndarray:
        if self.latest is None:
            return np.array(x, dtype=float)
        idx = min(k - self.latest.k, self.latest.states.shape[0] - 1)
        return self.latest.states[idx]

    def _record(self, k, action, x, nominal, u, dev, sol: Optional[OCPSolution] = None):
        kkt = float("nan")
        regular = None
        if sol is not None:
            kkt = sol.kkt.kkt_residual
            if sol.kkt.regularity is not None:
                regular = bool(sol.kkt.regularity.strongly_regular)
        return StepRecord(
            k=k,
            action=action,
            measured_state=np.array(x, dtype=float),
            nominal_state=np.array(nominal, dtype=float),
            applied_control=np.array(u, dtype=float),
            deviation_norm=dev,
            kkt_residual=kkt,
            strongly_regular=regular,
        )

    def _hold(self, k, x, nominal, dev, exc) -> tuple:
        if self.last_u is None:
            raise exc
        logger.warning("step %d: solver failed (%s); holding previous control", k, exc)
        return self.last_u.copy(), self._record(k, ACTION_FALLBACK, x, nominal, self.last_u, dev)

    def close(self):
        pass


class ClassicController(_Controller):
    """Full-horizon solve at every step; the plan is only ever used for one
    control and the next warm start."""

    def step(self, k: int, x) -> tuple:
        nominal = self._nominal(k, x)
        dev = self._deviation(x, nominal)
        try:
            plan = self._solve(k, x, self.cfg.N, self.latest.sol if self.latest else None)
        except SOLVER_ERRORS as exc:
            return self._hold(k, x, nominal, dev, exc)
        self.latest = plan
        u = self._clip(plan.controls[0], plan)
        self.last_u = u
        return u, self._record(k, ACTION_SOLVE, x, nominal, u, dev, plan.sol)


class MultistepController(_Controller):
    """Solve at shift starts, apply the stored plan open loop in between."""

    def __init__(self, *args):
        super().__init__(*args)
        self.anchor_k = -(10**9)

    def _shift_start(self, k: int) -> bool:
        return self.latest is None or k - self.anchor_k >= self.cfg.M

    def _start_shift(self, k: int, x, nominal, dev) -> tuple:
        try:
            plan = self._solve(k, x, self.cfg.N, self.latest.sol if self.latest else None)
        except SOLVER_ERRORS as exc:
            return self._hold(k, x, nominal, dev, exc)
        self.anchor_k = k
        self._adopt_anchor(plan)
        u = self._clip(plan.controls[0], plan)
        self.last_u = u
        return u, self._record(k, ACTION_SOLVE, x, nominal, u, dev, plan.sol)

    def _adopt_anchor(self, plan: _Plan):
        self.latest = plan

    def _inner(self, k: int, x, nominal, dev) -> tuple:
        u = self._clip(self.latest.controls[k - self.latest.k], self.latest)
        self.last_u = u
        return u, self._record(k, ACTION_REUSE, x, nominal, u, dev)

    def step(self, k: int, x) -> tuple:
        nominal = self._nominal(k, x)
        dev = self._deviation(x, nominal)
        if self._shift_start(k):
            return self._start_shift(k, x, nominal, dev)
        return self._inner(k, x, nominal, dev)


class MultistepReoptController(MultistepController):
    """Multistep with shrinking-horizon re-solves whenever the measurement
    leaves the plan (always, if reopt_on_deviation_only is off)."""

    def _resolve_inner(self, k: int, x, nominal, dev, z0=None, action=ACTION_REOPT) -> tuple:
        j = k - self.anchor_k
        stored = self._clip(self.latest.controls[k - self.latest.k], self.latest)
        try:
            plan = self._solve(k, x, self.cfg.N - j, self.latest.sol, z0=z0)
        except SOLVER_ERRORS as exc:
            logger.warning("step %d: re-solve failed (%s); using stored control", k, exc)
            self.last_u = stored
            return stored, self._record(k, ACTION_FALLBACK, x, nominal, stored, dev)
        self.latest = plan
        u = self._clip(plan.controls[0], plan)
        self.last_u = u
        return u, self._record(k, action, x, nominal, u, dev, plan.sol)

    def _inner(self, k: int, x, nominal, dev) -> tuple:
        if self.cfg.reopt_on_deviation_only and dev <= REOPT_DEVIATION_EPS:
            return super()._inner(k, x, nominal, dev)
        return self._resolve_inner(k, x, nominal, dev)


class MultistepSensController(MultistepReoptController):
    """Multistep with first-order control corrections inside the shift.

    The correction gains are prepared on a worker thread while the shift's
    first control is being applied and joined before the next decision.
    Shifts whose solution fails the regularity preconditions degrade to
    re-optimization behavior; corrections are clamped to the control bounds
    and deviations beyond the threshold trigger a shrinking-horizon re-solve
    seeded with the first-order update of the plan's tail.
    """

    def __init__(self, *args):
        super().__init__(*args)
        self._executor = ThreadPoolExecutor(max_workers=1)
        self._pending: Optional[tuple] = None
        self.anchor: Optional[_Plan] = None

    def close(self):
        self._join()
        self._executor.shutdown(wait=True)

    def _join(self):
        if self._pending is None:
            return
        plan, future = self._pending
        self._pending = None
        gains = future.result()
        if gains is not None:
            plan.gains = gains
            plan.gains_ok = True

    def _gain_count(self) -> int:
        top = self.cfg.M if self.cfg.trailing_gain else self.cfg.M - 1
        return min(top, self.cfg.N - 1)

    def _sensitivity_pass(self, plan: _Plan) -> Optional[ShiftedControlSensitivity]:
        try:
            t = Transcription(plan.sol.ocp)
            diffs = kkt_sensitivity(
                t.nlp,
                plan.sol.kkt,
                plan.sol.ocp.x0,
                trust_radius=self.cfg.sens_fallback_threshold,
                p_scale=self.scale,
            )
            return shifted_sensitivities(plan.sol, diffs, self._gain_count())
        except SensitivityError as exc:
            logger.info("shift at %d: sensitivity unavailable (%s)", plan.k, exc)
            return None

    def _adopt_anchor(self, plan: _Plan):
        self.latest = plan
        self.anchor = plan
        if plan.sol.relaxation_used:
            logger.info("shift at %d: relaxed solve, sensitivities skipped", plan.k)
        elif self._gain_count() >= 1:
            self._pending = (plan, self._executor.submit(self._sensitivity_pass, plan))

    def step(self, k: int, x) -> tuple:
        self._join()  # the previous shift's pass must land before any decision
        return super().step(k, x)

    def _inner(self, k: int, x, nominal, dev) -> tuple:
        anchor = self.anchor
        if anchor is None or not anchor.gains_ok or self.latest is not anchor:
            # no usable gains this shift (regularity failure or an earlier
            # in-shift re-solve): fall back to re-optimization behavior
            return super()._inner(k, x, nominal, dev)
        j = k - anchor.k
        if dev <= self.cfg.sens_fallback_threshold:
            delta = x - anchor.states[j]
            u = anchor.controls[j] + anchor.gains.gains[j - 1] @ delta
            u = self._clip(u, anchor)
            self.last_u = u
            return u, self._record(k, ACTION_SENS_UPDATE, x, nominal, u, dev)
        sol = anchor.sol
        t_tail = Transcription(self._make_ocp(k, x, self.cfg.N - j))
        z0 = t_tail.pack(sol.states[j:], sol.controls[j:])
        z0 = z0 + anchor.gains.tail_primal[j - 1] @ (x - anchor.states[j])
        return self._resolve_inner(k, x, nominal, dev, z0=z0, action=ACTION_FALLBACK)


_CONTROLLERS = {
    SCHEME_CLASSIC: ClassicController,
    SCHEME_MULTISTEP: MultistepController,
    SCHEME_MULTISTEP_REOPT: MultistepReoptController,
    SCHEME_MULTISTEP_SENS: MultistepSensController,
}


def make_controller(config: SchemeConfig, reference: ReferenceTrajectory, model=None, V=None, W=None):
    model = model if model is not None else KinematicCarModel()
    if V is None or W is None:
        if not isinstance(model, KinematicCarModel):
            raise ValueError("objective weights V, W are required for non-car models")
        V, W = build_objective_weights()
    return _CONTROLLERS[config.scheme](config, reference, model, V, W)


def run_scheme(
    config: SchemeConfig,
    plant,
    noise,
    reference: ReferenceTrajectory,
    t_f: float,
    *,
    x0=None,
    V=None,
    W=None,
) -> ClosedLoopTrace:
    """Run one scheme closed loop for t_f seconds on the reference grid.

    ``plant`` is the model stepped with the applied controls (the controller
    predicts with the same model); ``noise`` is either None or an object
    whose ``measure(k, x)`` returns the disturbed state at step k.  The
    disturbance enters the plant: the returned state is where the system
    actually is, and the controller measures it exactly.  Feedback frequency
    therefore decides how fast the schemes remove real deviations, which is
    what separates them.  Raises ClosedLoopError with the partial trace
    attached when a solver failure cannot be absorbed.
    """
    model = plant if plant is not None else KinematicCarModel()
    h = reference.h
    steps = int(round(t_f / h))
    if steps < 1 or abs(steps * h - t_f) > 1e-9 * max(1.0, abs(t_f)):
        raise ValueError(f"t_f={t_f} is not a positive multiple of the grid step {h}")

    controller = make_controller(config, reference, model, V, W)
    nx, nu = model.n_x, model.n_u
    x_true = np.array(reference.states[0] if x0 is None else x0, dtype=float).reshape(nx)

    states = np.empty((steps + 1, nx))
    controls = np.empty((steps, nu))
    states[0] = x_true
    records = []

    def partial_trace() -> ClosedLoopTrace:
        n = len(records)
        return _freeze_trace(config, h, states[: n + 1].copy(), controls[:n].copy(), records)

    try:
        for k in range(steps):
            if noise is not None:
                x_true = np.asarray(noise.measure(k, x_true), float).reshape(nx).copy()
            states[k] = x_true
            started = time.perf_counter()
            try:
                u, record = controller.step(k, x_true)
            except SOLVER_ERRORS as exc:
                raise ClosedLoopError(
                    f"{config.scheme} failed fatally at step {k}: {exc}", partial_trace()
                ) from exc
            record = dataclasses.replace(record, wall_time=time.perf_counter() - started)
            records.append(record)
            controls[k] = u
            x_true = model.step(x_true, u)
            states[k + 1] = x_true
    finally:
        controller.close()

    return _freeze_trace(config, h, states, controls, records)


def _freeze_trace(config, h, states, controls, records) -> ClosedLoopTrace:
    for arr in (states, controls):
        arr.setflags(write=False)
    return ClosedLoopTrace(
        config=config,
        h=h,
        states=states,
        controls=controls,
        records=tuple(records),
    )
