"""Multistep NMPC with parametric sensitivity updates on a kinematic car.

The top level re-exports the working surface: the car model, reference
trajectories, the tracking OCP and its solver, sensitivity differentials,
the four closed-loop schemes, and the experiment harness.  Submodules stay
importable for the internals (``carnmpc.nlp``, ``carnmpc.qp``, ...).
"""

from .dynamics import CarParams, KinematicCarModel
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    NoiseSource,
    TrackSpec,
    inject_noise,
    run_experiment,
    tracking_error_l2,
)
from .nlp import KKTSolution, ParametricNLP, RegularityReport, check_strong_regularity
from .nmpc import (
    SCHEMES,
    ClosedLoopError,
    ClosedLoopTrace,
    SchemeConfig,
    StepRecord,
    make_controller,
    run_scheme,
)
from .ocp import (
    OCPSolution,
    TrackingOCP,
    build_objective_weights,
    solve_ocp,
    tail,
    transcribe,
)
from .reference import (
    ReferenceTrajectory,
    ReferenceWindow,
    load_csv,
    save_csv,
    synth_track,
    window,
)
from .sensitivity import (
    SensitivityDifferentials,
    ShiftedControlSensitivity,
    kkt_sensitivity,
    shifted_sensitivities,
    taylor_update,
)

__version__ = "0.1.0"

__all__ = [
    "CarParams",
    "ClosedLoopError",
    "ClosedLoopTrace",
    "ExperimentConfig",
    "ExperimentResult",
    "KKTSolution",
    "KinematicCarModel",
    "NoiseSource",
    "OCPSolution",
    "ParametricNLP",
    "ReferenceTrajectory",
    "ReferenceWindow",
    "RegularityReport",
    "SCHEMES",
    "SchemeConfig",
    "SensitivityDifferentials",
    "ShiftedControlSensitivity",
    "StepRecord",
    "TrackSpec",
    "TrackingOCP",
    "build_objective_weights",
    "check_strong_regularity",
    "inject_noise",
    "kkt_sensitivity",
    "load_csv",
    "make_controller",
    "run_experiment",
    "run_scheme",
    "save_csv",
    "shifted_sensitivities",
    "solve_ocp",
    "synth_track",
    "tail",
    "taylor_update",
    "tracking_error_l2",
    "transcribe",
    "window",
    "__version__",
]
