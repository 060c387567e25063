"""Command line front end.

Subcommands: ``run`` (one scheme), ``compare`` (all configured schemes),
``check-regularity`` (solve a single OCP and print the regularity report),
``synth-track`` (emit a reference CSV).

``run`` and ``compare`` read an optional YAML config file whose keys map
one-to-one to :class:`carnmpc.harness.ExperimentConfig`; unknown keys are
rejected rather than ignored.  Flags override file values.  Exit codes:
0 success, 2 configuration error, 3 solver failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from .harness import (
    ExperimentConfig,
    GridMismatch,
    TrackSpec,
    build_reference,
    run_experiment,
    summary_table,
)
from .nlp import Degenerate, MaxIterations
from .nmpc import SCHEMES
from .ocp import TrackingOCP, build_objective_weights, solve_ocp
from .qp import QPInfeasible
from .reference import (
    InfeasibleGeometry,
    MissingColumn,
    ParseError,
    save_csv,
    synth_track,
    window,
)

__all__ = ["ConfigError", "build_config", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

TRACK_KINDS = ("straight", "circle", "oval", "chicane")

_TOP_KEYS = {
    "track", "x0", "N", "M", "h", "t_f", "alphas", "noise",
    "rng_seed", "schemes", "out_dir",
}
_TRACK_KEYS = {
    "file", "kind", "speed", "initial_speed", "radius", "straight_length",
    "chicane_delta", "start", "duration",
}
_NOISE_KEYS = {"amplitude", "peak_to_peak"}


class ConfigError(ValueError):
    """Bad config file or flag combination."""


def _check_keys(name: str, data: dict, allowed: set) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")


def _track_from_config(data: dict):
    _check_keys("track", data, _TRACK_KEYS)
    if "file" in data:
        synth = sorted(set(data) - {"file"})
        if synth:
            raise ConfigError(
                f"track: 'file' excludes synthesis key(s) {', '.join(synth)}"
            )
        return str(data["file"])
    kw = dict(data)
    if "start" in kw:
        kw["start"] = tuple(kw["start"])
    return TrackSpec(**kw)


def _amplitude_from_config(data: dict) -> float:
    _check_keys("noise", data, _NOISE_KEYS)
    if "amplitude" in data and "peak_to_peak" in data:
        raise ConfigError("noise: give either amplitude or peak_to_peak, not both")
    if "peak_to_peak" in data:
        return float(data["peak_to_peak"]) / 2.0
    if "amplitude" in data:
        return float(data["amplitude"])
    raise ConfigError("noise: expected amplitude or peak_to_peak")


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at top level")
    return data


def build_config(file_data: dict, args) -> ExperimentConfig:
    """ExperimentConfig from config-file data with flag overrides applied."""
    _check_keys("config", file_data, _TOP_KEYS)
    kw = {}
    for key in ("N", "M", "rng_seed"):
        if key in file_data:
            kw[key] = int(file_data[key])
    for key in ("h", "t_f"):
        if key in file_data:
            kw[key] = float(file_data[key])
    if "x0" in file_data:
        kw["x0"] = tuple(float(v) for v in file_data["x0"])
    if "alphas" in file_data:
        kw["alphas"] = tuple(float(v) for v in file_data["alphas"])
    if "schemes" in file_data:
        kw["schemes"] = tuple(str(s) for s in file_data["schemes"])
    if "out_dir" in file_data:
        kw["out_dir"] = str(file_data["out_dir"])
    if "track" in file_data:
        kw["track"] = _track_from_config(file_data["track"])
    if "noise" in file_data:
        kw["noise_amplitude"] = _amplitude_from_config(file_data["noise"])

    if getattr(args, "seed", None) is not None:
        kw["rng_seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        kw["out_dir"] = args.out_dir
    if getattr(args, "noise", None) is not None:
        kw["noise_amplitude"] = args.noise
    scheme = getattr(args, "scheme", None)
    if scheme is not None:
        kw["schemes"] = (scheme,)
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _config_from_args(args) -> ExperimentConfig:
    file_data = load_config_file(args.config) if args.config else {}
    return build_config(file_data, args)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if len(cfg.schemes) != 1:
        raise ConfigError(
            "run wants exactly one scheme; pass --scheme or list one in the config"
        )
    res = run_experiment(cfg)
    sys.stdout.write(summary_table(res.summary))
    sys.stdout.write(f"files in {res.out_dir}\n")
    return EXIT_SOLVER if res.summary[0].failure else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    res = run_experiment(cfg)
    sys.stdout.write(summary_table(res.summary))
    sys.stdout.write(f"files in {res.out_dir}\n")
    return EXIT_SOLVER if any(r.failure for r in res.summary) else EXIT_OK


def cmd_check_regularity(args) -> int:
    cfg = _config_from_args(args)
    ref = build_reference(cfg)
    V, W = build_objective_weights(cfg.alphas)
    ocp = TrackingOCP(
        k0=args.k0,
        x0=np.array(cfg.x0, dtype=float),
        N=cfg.N,
        reference_window=window(ref, args.k0, cfg.N),
        V=V,
        W=W,
        h=cfg.h,
    )
    sol = solve_ocp(ocp)
    rep = sol.kkt.regularity
    checks = (
        ("LICQ", rep.licq_ok, f"sigma_min={rep.licq_sigma_min:.3e}"),
        ("KKT", rep.kkt_ok, f"residual={rep.kkt_residual:.3e}"),
        ("strict complementarity", rep.strict_complementarity_ok,
         f"margin={rep.strict_complementarity_margin:.3e}"),
        ("second order", rep.second_order_ok, f"eigmin={rep.second_order_eigmin:.3e}"),
    )
    for name, ok, detail in checks:
        sys.stdout.write(f"{name:24s} {'ok' if ok else 'FAIL':4s} {detail}\n")
    verdict = "strongly regular" if rep.strongly_regular else "NOT strongly regular"
    sys.stdout.write(f"objective={sol.objective_value:.6e}  {verdict}\n")
    return EXIT_OK


def cmd_synth_track(args) -> int:
    kw = dict(duration=args.duration, h=args.h, speed=args.speed,
              initial_speed=args.initial_speed, start=tuple(args.start))
    if args.kind in ("circle", "oval"):
        kw["radius"] = args.radius
    if args.kind == "oval":
        kw["straight_length"] = args.straight_length
    if args.kind == "chicane":
        kw["chicane_delta"] = args.chicane_delta
    ref = synth_track(args.kind, **kw)
    save_csv(args.out, ref)
    sys.stdout.write(f"wrote {ref.n_samples} samples to {args.out}\n")
    return EXIT_OK


def _triple(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,psi")
    return tuple(parts)


def _add_experiment_flags(sub, with_scheme: bool) -> None:
    sub.add_argument("--config", metavar="FILE", help="YAML experiment config")
    sub.add_argument("--seed", type=int, help="override the noise seed")
    sub.add_argument("--out-dir", help="override the output directory")
    sub.add_argument("--noise", type=float, metavar="A",
                     help="override the noise amplitude (uniform on [-A, A])")
    if with_scheme:
        sub.add_argument("--scheme", choices=SCHEMES, help="scheme to run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carnmpc", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("run", help="closed-loop run of a single scheme")
    _add_experiment_flags(p, with_scheme=True)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("compare", help="run all configured schemes under one noise realization")
    _add_experiment_flags(p, with_scheme=False)
    p.set_defaults(func=cmd_compare)

    p = subs.add_parser("check-regularity", help="solve one OCP and print the regularity report")
    _add_experiment_flags(p, with_scheme=False)
    p.add_argument("--k0", type=int, default=0, help="reference index of the OCP start")
    p.set_defaults(func=cmd_check_regularity)

    p = subs.add_parser("synth-track", help="emit a synthetic reference CSV")
    p.add_argument("--kind", choices=TRACK_KINDS, default="oval")
    p.add_argument("--duration", type=float, default=110.0)
    p.add_argument("--h", type=float, default=0.3)
    p.add_argument("--speed", type=float, default=10.0)
    p.add_argument("--initial-speed", type=float, default=None,
                   help="run in from this speed to the cruise speed")
    p.add_argument("--radius", type=float, default=40.0)
    p.add_argument("--straight-length", type=float, default=60.0)
    p.add_argument("--chicane-delta", type=float, default=0.15)
    p.add_argument("--start", type=_triple, default=(0.0, 0.0, 0.0), metavar="X,Y,PSI")
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=cmd_synth_track)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (GridMismatch, MissingColumn, ParseError, InfeasibleGeometry) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (MaxIterations, Degenerate, QPInfeasible) as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
