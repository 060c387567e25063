"""Reference trajectories: CSV ingestion, synthetic tracks, OCP windows.

A reference is a uniformly sampled sequence of car states and controls.
Synthetic tracks are generated by choosing bounded control profiles and
rolling them through the same discrete step map the controller uses, so they
are dynamically consistent to machine precision; ingested tracks may come
from richer models and are only checked, not rejected.

CSV schema (canonical form): header ``k,t,x,y,psi,v,delta,u1,u2``, UTF-8,
``\\n`` line endings, ``repr``-shortest float formatting, t = k*h.  Files
ending in ``.gz`` are transparently (de)compressed.
"""

from __future__ import annotations

import csv
import gzip
import io
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .dynamics import CarParams

__all__ = [
    "CSV_COLUMNS",
    "InfeasibleGeometry",
    "MissingColumn",
    "NonUniformGrid",
    "ParseError",
    "ReferenceTrajectory",
    "ReferenceWindow",
    "load_csv",
    "save_csv",
    "synth_track",
    "window",
]

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("k", "t", "x", "y", "psi", "v", "delta", "u1", "u2")

# steering-rate headroom for generated ramps: 10% inside the |u2| <= 0.5 bound
RAMP_RATE = 0.45

# speed run-in acceleration magnitude; well inside the car's control box
RUNIN_ACCEL = 2.0

CONSISTENCY_WARN = 1e-6


class MissingColumn(ValueError):
    """CSV header lacks a required column."""


class NonUniformGrid(ValueError):
    """CSV timestamps deviate from a uniform grid by more than 1e-9."""


class ParseError(ValueError):
    """Malformed CSV content."""


class InfeasibleGeometry(ValueError):
    """Requested track geometry needs a steering angle beyond the bound."""


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Uniform-grid reference samples (x, y, psi, v, delta, u1, u2)."""

    h: float
    samples: np.ndarray
    consistency: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))
        if self.samples.ndim != 2 or self.samples.shape[1] != 7:
            raise ValueError("samples must be an (n, 7) array")
        if self.h <= 0.0:
            raise ValueError("sampling time must be positive")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.samples[:, :5]

    @property
    def controls(self) -> np.ndarray:
        return self.samples[:, 5:]


@dataclass(frozen=True)
class ReferenceWindow:
    """Reference slice for one OCP: N+1 state and control samples."""

    states: np.ndarray
    controls: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def shifted(self, j: int) -> "ReferenceWindow":
        return ReferenceWindow(self.states[j:], self.controls[j:])


def _consistency_defect(samples: np.ndarray, h: float, params: CarParams) -> float:
    worst = 0.0
    for k in range(samples.shape[0] - 1):
        pred = kernels.rk4_step(samples[k, :5], samples[k, 5:], params.wheelbase_l, h)
        worst = max(worst, float(np.abs(pred - samples[k + 1, :5]).max()))
    return worst


def _open_text(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def load_csv(path, params: CarParams = CarParams()) -> ReferenceTrajectory:
    """Parse a reference CSV; attaches the dynamic-consistency metric."""
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")
        if tuple(header) != CSV_COLUMNS:
            raise ParseError(f"header {header} does not match {list(CSV_COLUMNS)}")
        times = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ParseError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            times.append(values[1])
            rows.append(values[2:])
    if len(rows) < 2:
        raise ParseError("need at least two samples")
    times = np.asarray(times)
    h = times[1] - times[0]
    if h <= 0.0:
        raise NonUniformGrid("timestamps not increasing")
    dt = np.diff(times)
    if np.abs(dt - h).max() > 1e-9:
        raise NonUniformGrid(f"grid deviation {np.abs(dt - h).max():.3e} exceeds 1e-9")
    samples = np.asarray(rows)
    metric = _consistency_defect(samples, h, params._replace(step_h=h))
    if metric > CONSISTENCY_WARN:
        logger.warning(
            "reference is not dynamically consistent (max defect %.3e); "
            "treating it as a target only", metric,
        )
    return ReferenceTrajectory(h=h, samples=samples, consistency=metric)


def save_csv(path, ref: ReferenceTrajectory) -> None:
    """Write the canonical CSV form (see module docstring)."""
    with _open_text(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for k in range(ref.n_samples):
            fields = [str(k), repr(float(k * ref.h))]
            fields += [repr(float(v)) for v in ref.samples[k]]
            fh.write(",".join(fields) + "\n")


def _roll_out(state0: np.ndarray, controls: np.ndarray, h: float, params: CarParams) -> np.ndarray:
    """Stack states obtained by stepping state0 under the control sequence."""
    n = controls.shape[0]
    samples = np.empty((n, 7))
    s = np.asarray(state0, dtype=float)
    for k in range(n):
        samples[k, :5] = s
        samples[k, 5:] = controls[k]
        if k + 1 < n:
            s = kernels.rk4_step(s, controls[k], params.wheelbase_l, h)
    return samples


def _sample_count(duration: float, h: float) -> int:
    return int(math.ceil(duration / h - 1e-9)) + 1


def _steering_program(pieces, n: int, h: float) -> np.ndarray:
    """Piecewise-constant u2 from (step_count, rate) pieces, cycled to n steps."""
    u2 = np.zeros(n)
    k = 0
    while k < n:
        for count, rate in pieces:
            take = min(count, n - k)
            u2[k : k + take] = rate
            k += take
            if k >= n:
                break
    return u2


def min_turn_radius(params: CarParams = CarParams(), delta_max: float = 0.5) -> float:
    """Radius below which the steady turn needs delta beyond the bound."""
    return params.wheelbase_l / math.tan(delta_max)


def _steady_delta(radius: float, params: CarParams) -> float:
    if radius <= 0.0:
        raise InfeasibleGeometry("radius must be positive")
    delta = math.atan(params.wheelbase_l / radius)
    if delta > 0.5:
        raise InfeasibleGeometry(
            f"radius {radius:g} m needs delta {delta:.3f} rad > 0.5 "
            f"(minimum radius {min_turn_radius(params):.2f} m)"
        )
    return delta


def synth_track(
    kind: str,
    *,
    duration: float = 110.0,
    h: float = 0.3,
    speed: float = 10.0,
    initial_speed: Optional[float] = None,
    start: tuple = (0.0, 0.0, 0.0),
    radius: float = 40.0,
    straight_length: float = 60.0,
    chicane_delta: float = 0.15,
    params: CarParams = CarParams(),
) -> ReferenceTrajectory:
    """Generate a dynamically consistent reference of the requested kind.

    Kinds: ``straight`` (constant heading), ``circle`` (steady turn of the
    given radius), ``oval`` (straights joined by half turns with bounded-rate
    steering ramps), ``chicane`` (straight with a left-right swerve).

    ``initial_speed`` prepends a constant-acceleration run-in from that speed
    to the cruise ``speed`` (at most ``RUNIN_ACCEL``); steering stays zero
    until the run-in ends, so the geometry starts on the initial heading.
    """
    if speed <= 0.0 or speed > 60.0:
        raise InfeasibleGeometry("speed must lie in (0, 60] m/s")
    if initial_speed is None:
        initial_speed = speed
    if initial_speed <= 0.0 or initial_speed > 60.0:
        raise InfeasibleGeometry("initial_speed must lie in (0, 60] m/s")
    n = _sample_count(duration, h)
    x0, y0, psi0 = start
    state0 = np.array([x0, y0, psi0, initial_speed, 0.0])
    controls = np.zeros((n, 2))

    n_runin = 0
    if initial_speed != speed:
        dv = speed - initial_speed
        n_runin = max(1, int(math.ceil(abs(dv) / (RUNIN_ACCEL * h) - 1e-9)))
        if n_runin >= n:
            raise InfeasibleGeometry("duration too short for the speed run-in")
        controls[:n_runin, 0] = dv / (n_runin * h)

    if kind == "straight":
        pass
    elif kind == "circle":
        state0[4] = _steady_delta(radius, params)
    elif kind == "oval":
        delta_ss = _steady_delta(radius, params)
        n_ramp = max(1, int(math.ceil(delta_ss / (RAMP_RATE * h))))
        rate = delta_ss / (n_ramp * h)
        n_straight = max(1, int(round(straight_length / (speed * h))))
        # half turn: total yaw change pi; ramps contribute like half an arc step
        yaw_rate = speed * math.tan(delta_ss) / params.wheelbase_l
        n_arc = max(0, int(round((math.pi / yaw_rate - n_ramp * h) / h)))
        pieces = [
            (n_straight, 0.0),
            (n_ramp, rate),
            (n_arc, 0.0),
            (n_ramp, -rate),
        ]
        controls[n_runin:, 1] = _steering_program(pieces, n - n_runin, h)
    elif kind == "chicane":
        if not 0.0 < chicane_delta <= 0.5:
            raise InfeasibleGeometry("chicane_delta must lie in (0, 0.5]")
        n_ramp = max(1, int(math.ceil(chicane_delta / (RAMP_RATE * h))))
        rate = chicane_delta / (n_ramp * h)
        n_hold = max(1, int(round(1.0 / h)))
        n_straight = max(1, int(round(straight_length / (speed * h))))
        pieces = [
            (n_straight, 0.0),
            (n_ramp, rate),
            (n_hold, 0.0),
            (2 * n_ramp, -rate),
            (n_hold, 0.0),
            (n_ramp, rate),
        ]
        controls[n_runin:, 1] = _steering_program(pieces, n - n_runin, h)
    else:
        raise ValueError(f"unknown track kind {kind!r}")

    roll_params = params._replace(step_h=h)
    samples = _roll_out(state0, controls, h, roll_params)
    if np.abs(samples[:, 4]).max() > 0.5 + 1e-12:
        raise InfeasibleGeometry("generated steering profile exceeds the bound")
    metric = _consistency_defect(samples, h, roll_params)
    return ReferenceTrajectory(h=h, samples=samples, consistency=metric)


def window(ref: ReferenceTrajectory, k0: int, N: int) -> ReferenceWindow:
    """N+1 reference samples from k0 on, holding the last sample past the end."""
    if k0 < 0:
        raise ValueError("k0 must be nonnegative")
    idx = np.minimum(np.arange(k0, k0 + N + 1), ref.n_samples - 1)
    return ReferenceWindow(states=ref.states[idx], controls=ref.controls[idx])
