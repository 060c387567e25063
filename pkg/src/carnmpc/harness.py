"""Experiment orchestration: comparison runs of the feedback schemes.

Builds (or loads) a reference, runs the configured schemes against the same
per-step disturbance realization, and writes one trace CSV per scheme plus a
plain-text and a JSON summary.

Trace CSV layout (one row per applied control, reference float formatting):

    k,t,x,y,psi,v,delta,u1,u2,err_x,err_y,err_v,action,deviation,
    kkt_residual,strongly_regular

``err_*`` are the tracking errors against the reference at the decision
time, so the summary's L2 error can be recomputed from the file alone.
``strongly_regular`` is empty for decisions that did not involve a solve.
Wall times stay in the in-memory records only; files are byte-identical
across reruns with the same seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .dynamics import KinematicCarModel
from .nmpc import (
    SCHEME_CLASSIC,
    SCHEMES,
    ClosedLoopError,
    ClosedLoopTrace,
    SchemeConfig,
    run_scheme,
)
from .ocp import build_objective_weights
from .reference import ReferenceTrajectory, _open_text, load_csv, synth_track

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "GridMismatch",
    "NOISE_COMPONENTS",
    "NoiseSource",
    "SchemeSummary",
    "TrackSpec",
    "TRACE_COLUMNS",
    "build_reference",
    "inject_noise",
    "read_trace_csv",
    "run_experiment",
    "summary_table",
    "tracking_error_l2",
]

# disturbance hits position and speed; heading and steering are exact
NOISE_COMPONENTS = (0, 1, 3)

TRACE_COLUMNS = (
    "k", "t", "x", "y", "psi", "v", "delta", "u1", "u2",
    "err_x", "err_y", "err_v", "action", "deviation", "kkt_residual",
    "strongly_regular",
)


class GridMismatch(ValueError):
    """Trace and reference do not share the sampling grid."""


@dataclass(frozen=True)
class TrackSpec:
    """Synthetic reference description (see ``reference.synth_track``).

    The defaults are a slow oval entered at speed: the reference starts at
    the experiment's initial speed (10 m/s), brakes to the 6 m/s cruise, and
    sits 8.3 m from the default start state.  At the cruise speed a lateral
    correction takes most of the preview horizon, so how much horizon a
    scheme re-optimizes over is visible in its tracking error instead of
    drowning in the noise floor.
    """

    kind: str = "oval"
    speed: float = 6.0
    initial_speed: Optional[float] = 10.0
    radius: float = 20.0
    straight_length: float = 40.0
    chicane_delta: float = 0.15
    start: tuple = (0.0, -8.3, 0.0)
    duration: Optional[float] = None  # None: cover t_f plus the preview horizon


@dataclass(frozen=True)
class ExperimentConfig:
    """One comparison experiment.

    Defaults replicate the benchmark setup: preview horizon N=11 at
    h=0.3 s (3 s lookahead), control horizon M=3, t_f=110 s, uniform
    disturbance of amplitude 0.05 on (x, y, v), weights (1, 0.1, 0.001),
    and an initial state displaced 8.3 m in y from the reference start
    (speeds matched; the reference then brakes to its cruise speed).
    t_f that is not a grid multiple is truncated to the last full step.
    """

    track: Union[TrackSpec, str] = field(default_factory=TrackSpec)
    x0: tuple = (0.0, 0.0, 0.0, 10.0, 0.0)
    N: int = 11
    M: int = 3
    h: float = 0.3
    t_f: float = 110.0
    alphas: tuple = (1.0, 0.1, 0.001)
    noise_amplitude: float = 0.05
    rng_seed: int = 0
    schemes: tuple = SCHEMES
    out_dir: str = "runs"

    def __post_init__(self):
        if self.h <= 0.0:
            raise ValueError("h must be positive")
        if self.N < 1 or not 1 <= self.M <= self.N:
            raise ValueError(f"need N >= 1 and 1 <= M <= N, got N={self.N} M={self.M}")
        if self.t_f < self.h:
            raise ValueError("t_f must cover at least one step")
        if self.noise_amplitude < 0.0:
            raise ValueError("noise_amplitude must be nonnegative")
        if not 0 <= int(self.rng_seed) < 2**63:
            raise ValueError("rng_seed must fit an unsigned 64-bit key")
        if len(self.x0) != 5:
            raise ValueError("x0 must have 5 components")
        if len(self.alphas) != 3:
            raise ValueError("alphas must have 3 components")
        unknown = [s for s in self.schemes if s not in SCHEMES]
        if unknown or not self.schemes:
            raise ValueError(f"schemes must be a nonempty subset of {SCHEMES}, got {self.schemes}")

    @property
    def steps(self) -> int:
        return int(math.floor(self.t_f / self.h + 1e-9))


@dataclass(frozen=True)
class SchemeSummary:
    scheme: str
    l2_error: float
    steps: int
    full_solves: int
    reopt_solves: int
    sens_updates: int
    fallbacks: int
    reuses: int
    failure: Optional[str] = None


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    reference: ReferenceTrajectory
    traces: dict
    summary: tuple
    out_dir: Path


def inject_noise(state, amplitude: float, rng) -> np.ndarray:
    """Perturb (x, y, v) by independent uniform draws on [-amplitude, amplitude]."""
    if amplitude < 0.0:
        raise ValueError("amplitude must be nonnegative")
    out = np.array(state, dtype=float)
    out[list(NOISE_COMPONENTS)] += rng.uniform(-amplitude, amplitude, size=len(NOISE_COMPONENTS))
    return out


class NoiseSource:
    """Counter-based disturbance stream shared across schemes.

    Draw k comes from a Philox generator keyed by (seed, k), so the
    realization is a pure function of the seed and the step index: schemes
    compared under the same source receive identical disturbances wherever
    their trajectories coincide, regardless of how often each one asks.
    """

    def __init__(self, seed: int, amplitude: float):
        if amplitude < 0.0:
            raise ValueError("amplitude must be nonnegative")
        if not 0 <= int(seed) < 2**63:
            raise ValueError("seed must fit an unsigned 64-bit key")
        self.seed = int(seed)
        self.amplitude = float(amplitude)

    def measure(self, k: int, x) -> np.ndarray:
        key = np.array([self.seed, int(k)], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        return inject_noise(x, self.amplitude, rng)


def tracking_error_l2(trace: ClosedLoopTrace, ref: ReferenceTrajectory) -> float:
    """sqrt(h * sum_k [(x-x_r)^2 + (y-y_r)^2 + (v-v_r)^2]) over decision times."""
    if abs(trace.h - ref.h) > 1e-12 * max(1.0, abs(ref.h)):
        raise GridMismatch(f"trace step {trace.h} != reference step {ref.h}")
    n = trace.steps
    if ref.n_samples < n:
        raise GridMismatch(f"reference has {ref.n_samples} samples, trace needs {n}")
    cols = list(NOISE_COMPONENTS)
    err = trace.states[:n, cols] - ref.states[:n, cols]
    return float(np.sqrt(trace.h * np.sum(err * err)))


def build_reference(cfg: ExperimentConfig) -> ReferenceTrajectory:
    """Load the reference CSV or synthesize the configured track."""
    if isinstance(cfg.track, (str, Path)):
        ref = load_csv(cfg.track)
        if abs(ref.h - cfg.h) > 1e-12:
            raise GridMismatch(f"track file grid {ref.h} does not match configured h {cfg.h}")
        if ref.n_samples < cfg.steps:
            raise GridMismatch(
                f"track file has {ref.n_samples} samples, t_f={cfg.t_f} needs {cfg.steps}"
            )
        return ref
    spec = cfg.track
    # Cover the last solve's preview window too, else the final OCPs chase a
    # held (frozen-position) tail and the closing steps drift off the track.
    duration = (cfg.steps + cfg.N) * cfg.h if spec.duration is None else spec.duration
    kw = dict(
        duration=duration,
        h=cfg.h,
        speed=spec.speed,
        initial_speed=spec.initial_speed,
        start=tuple(spec.start),
        radius=spec.radius,
        straight_length=spec.straight_length,
    )
    if spec.kind == "chicane":
        kw["chicane_delta"] = spec.chicane_delta
    ref = synth_track(spec.kind, **kw)
    if ref.n_samples < cfg.steps:
        raise GridMismatch(
            f"track duration {duration} gives {ref.n_samples} samples, t_f={cfg.t_f} needs {cfg.steps}"
        )
    return ref


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trace_csv(path, trace: ClosedLoopTrace, ref: ReferenceTrajectory) -> None:
    with _open_text(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for rec in trace.records:
            k = rec.k
            state = trace.states[k]
            u = trace.controls[k]
            err = state[list(NOISE_COMPONENTS)] - ref.states[k, list(NOISE_COMPONENTS)]
            regular = "" if rec.strongly_regular is None else str(int(rec.strongly_regular))
            fields = [str(k), _fmt(k * trace.h)]
            fields += [_fmt(v) for v in state]
            fields += [_fmt(v) for v in u]
            fields += [_fmt(v) for v in err]
            fields += [rec.action, _fmt(rec.deviation_norm), _fmt(rec.kkt_residual), regular]
            fh.write(",".join(fields) + "\n")


def read_trace_csv(path) -> dict:
    """Trace CSV back as a dict of column arrays (floats where possible)."""
    with _open_text(path, "r") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    out = {}
    for j, name in enumerate(TRACE_COLUMNS):
        col = [r[j] for r in rows]
        if name in ("action", "strongly_regular"):
            out[name] = np.array(col, dtype=object)
        elif name == "k":
            out[name] = np.array(col, dtype=int)
        else:
            out[name] = np.array([float(v) for v in col])
    return out


def _summarize(scheme, trace, ref, failure) -> SchemeSummary:
    if trace is None or trace.steps == 0:
        return SchemeSummary(scheme, float("nan"), 0, 0, 0, 0, 0, 0, failure)
    return SchemeSummary(
        scheme=scheme,
        l2_error=tracking_error_l2(trace, ref),
        steps=trace.steps,
        full_solves=trace.full_solves,
        reopt_solves=trace.reopt_solves,
        sens_updates=trace.sens_updates,
        fallbacks=trace.fallbacks,
        reuses=trace.reuses,
        failure=failure,
    )


def summary_table(rows) -> str:
    """The summary rows as a fixed-width text table."""
    widths = "{:16s} {:>12s} {:>6s} {:>6s} {:>6s} {:>6s} {:>6s} {:>6s}  {}"
    lines = [
        widths.format("scheme", "l2_error", "steps", "solve", "reopt", "sens", "fall", "reuse", "status")
    ]
    for r in rows:
        lines.append(
            widths.format(
                r.scheme,
                "nan" if math.isnan(r.l2_error) else f"{r.l2_error:.6f}",
                str(r.steps),
                str(r.full_solves),
                str(r.reopt_solves),
                str(r.sens_updates),
                str(r.fallbacks),
                str(r.reuses),
                r.failure or "ok",
            )
        )
    return "\n".join(lines) + "\n"


def _write_summary(out_dir: Path, cfg: ExperimentConfig, rows) -> None:
    payload = {
        "config": _config_dict(cfg),
        "schemes": [dataclasses.asdict(r) for r in rows],
    }
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.txt").write_text(summary_table(rows))


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if isinstance(cfg.track, TrackSpec):
        d["track"] = dataclasses.asdict(cfg.track)
    else:
        d["track"] = str(cfg.track)
    return d


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every configured scheme against the shared disturbance realization.

    A scheme that fails fatally is recorded in the summary (with whatever
    trace it produced) and the remaining schemes still run.  Returns the
    traces, the summary rows, and the output directory; the same seed
    reproduces the emitted files byte for byte.
    """
    ref = build_reference(cfg)
    t_run = cfg.steps * cfg.h
    V, W = build_objective_weights(cfg.alphas)
    noise = NoiseSource(cfg.rng_seed, cfg.noise_amplitude) if cfg.noise_amplitude > 0 else None
    model = KinematicCarModel()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    traces = {}
    rows = []
    for scheme in cfg.schemes:
        sc = SchemeConfig(scheme, N=cfg.N, M=1 if scheme == SCHEME_CLASSIC else cfg.M)
        failure = None
        try:
            trace = run_scheme(sc, model, noise, ref, t_run, x0=np.array(cfg.x0, dtype=float), V=V, W=W)
        except ClosedLoopError as exc:
            trace = exc.trace
            failure = str(exc)
        if trace is not None and trace.steps > 0:
            write_trace_csv(out_dir / f"{scheme}.csv", trace, ref)
            traces[scheme] = trace
        rows.append(_summarize(scheme, trace, ref, failure))
    _write_summary(out_dir, cfg, rows)
    return ExperimentResult(config=cfg, reference=ref, traces=traces, summary=tuple(rows), out_dir=out_dir)
