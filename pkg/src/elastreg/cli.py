"""``elastreg`` command line: phantom, register, warp, eval.

Exit codes: 0 success, 1 usage or invalid parameter, 2 I/O, 3 numerical or
data-consistency failure (grid mismatch, fiducial pairing, degenerate input).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numba
import numpy as np

from .errors import (GridMismatchError, InvalidParameterError, NumericalError, PairingError,
                     PhantomGenerationError)
from .evaluation import (AccuracyReport, ReportRow, consistency_stats, fiducial_distances,
                         fiducial_stats, report_csv, write_report)
from .io import read_fiducials, read_vol3, write_fiducials, write_vol3
from .phantom import PhantomSpec, make_phantom_pair
from .pipeline import register_pair
from .rigid import RigidTransform
from .solver import SolverParams
from .volume import DisplacementField, ScalarVolume, warp_volume

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
TIMING_SCOPE = "wall clock including pyramid construction; elastic row includes the rigid stage"

log = logging.getLogger("elastreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str, typ=float):
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    try:
        return tuple(typ(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None


def _int_triple(text: str):
    return _triple(text, int)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: ELASTREG_THREADS, else all cores)")
    p.add_argument("--config", type=Path, default=None,
                   help="key=value file of flag defaults ('#' comments); explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-level progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elastreg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic fixed/moving pair with truth")
    _common(p)
    p.add_argument("--size", type=_int_triple, default=(64, 64, 64), help="N or NX,NY,NZ voxels")
    p.add_argument("--spacing", type=_triple, default=(1.0, 1.0, 1.0), help="mm, 1 or 3 values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deform-amp-mm", type=float, default=4.0)
    p.add_argument("--deform-radius-mm", type=float, default=None)
    p.add_argument("--probe-contact", type=_triple, default=None, help="X,Y,Z mm")
    p.add_argument("--gland-semi-axes", type=_triple, default=None, help="A,B,C mm")
    p.add_argument("--n-fiducials", type=int, default=12)
    p.add_argument("--bias-amp", type=float, default=0.0)
    p.add_argument("--speckle", type=float, default=0.2)
    p.add_argument("--shadow", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--out-prefix", type=str, default="phantom")

    p = sub.add_parser("register", help="rigid + inverse-consistent elastic registration")
    _common(p)
    d = SolverParams()
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--rigid", choices=("auto", "none"), default="auto")
    p.add_argument("--distance", choices=("shift-ssd", "ssd"), default="shift-ssd")
    p.add_argument("--sigma", type=float, default=d.sigma, help="shift filter width, voxels")
    p.add_argument("--sigma-per-level", type=_bool, nargs="?", const=True,
                   default=d.sigma_per_level)
    p.add_argument("--mu", type=float, default=d.mu)
    p.add_argument("--poisson", type=float, default=d.poisson)
    p.add_argument("--dt", type=float, default=d.dt)
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--cap", type=float, default=d.cap_voxels, help="per-iteration step, voxels")
    p.add_argument("--tol", type=float, default=d.tol)
    p.add_argument("--max-outer", type=int, default=d.max_outer)
    p.add_argument("--gs-sweeps", type=int, default=d.gs_sweeps)
    p.add_argument("--intensity-range", type=float, default=d.intensity_range,
                   help="rescale the fixed 1-99%% intensity span to this value; 0 disables")
    p.add_argument("--out-forward", type=Path, default=Path("forward.vol3"))
    p.add_argument("--out-backward", type=Path, default=Path("backward.vol3"))
    p.add_argument("--out-rigid", type=Path, default=None,
                   help="rigid parameter file (default: next to --out-forward)")
    p.add_argument("--report", type=Path, default=None)

    p = sub.add_parser("warp", help="backward-warp an image through a displacement field")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="fiducial accuracy table")
    _common(p)
    p.add_argument("--fid-fixed", type=Path, required=True)
    p.add_argument("--fid-moving", type=Path, required=True)
    p.add_argument("--field", type=Path, default=None, help="complete fixed->moving field")
    p.add_argument("--rigid-params", type=Path, default=None)
    p.add_argument("--register-report", type=Path, default=None,
                   help="register report supplying the stage timings")
    p.add_argument("--report", type=Path, default=None)
    return parser


# -- config and threads ----------------------------------------------------------------


def read_config(path: Path) -> dict:
    """Parse ``key=value`` lines; keys are flag names with or without dashes."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install config-file values as defaults of the chosen subcommand."""
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    if path is None or command not in COMMANDS:
        return
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, value in read_config(path).items():
        act = actions.get(key)
        if act is None or key in ("help", "config"):
            raise UsageError(f"config key {key!r} is not a flag of '{command}'")
        try:
            if isinstance(act, argparse._StoreTrueAction):
                defaults[key] = _bool(value)
            else:
                defaults[key] = act.type(value) if act.type is not None else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if act.choices is not None and defaults[key] not in act.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(act.choices)}")
        act.required = False
    sp.set_defaults(**defaults)


def resolve_threads(requested) -> int:
    if requested is None:
        env = os.environ.get("ELASTREG_THREADS", "").strip()
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise UsageError(f"ELASTREG_THREADS must be an integer, got {env!r}") from None
    pool = numba.config.NUMBA_NUM_THREADS
    if requested is None:
        return pool
    if requested < 1:
        raise UsageError(f"--threads must be >= 1, got {requested}")
    if requested > pool:
        raise UsageError(f"--threads {requested} exceeds the worker pool ({pool}); "
                         f"set ELASTREG_THREADS or NUMBA_NUM_THREADS before starting")
    return requested


# -- commands ---------------------------------------------------------------------------


def _spec_from_args(a) -> PhantomSpec:
    return PhantomSpec(dims=a.size, spacing=a.spacing, gland_semi_axes=a.gland_semi_axes,
                       n_fiducials=a.n_fiducials, deform_amplitude=a.deform_amp_mm,
                       deform_radius=a.deform_radius_mm, probe_contact=a.probe_contact,
                       speckle_strength=a.speckle, bias_amplitude=a.bias_amp,
                       shadow=bool(a.shadow), seed=a.seed)


def phantom_paths(prefix: str) -> dict:
    return {k: Path(f"{prefix}_{k}{ext}") for k, ext in
            (("fixed", ".vol3"), ("moving", ".vol3"), ("truth", ".vol3"),
             ("fixed_fid", ".csv"), ("moving_fid", ".csv"))}


def cmd_phantom(a) -> int:
    spec = _spec_from_args(a)
    pair = make_phantom_pair(spec)
    paths = phantom_paths(a.out_prefix)
    paths["fixed"].parent.mkdir(parents=True, exist_ok=True)
    write_vol3(paths["fixed"], pair.fixed)
    write_vol3(paths["moving"], pair.moving)
    write_vol3(paths["truth"], pair.truth)
    write_fiducials(paths["fixed_fid"], pair.fixed_fiducials)
    write_fiducials(paths["moving_fid"], pair.moving_fiducials)
    for p in paths.values():
        print(p)
    return EXIT_OK


def _params_from_args(a) -> SolverParams:
    return SolverParams(
        mu=a.mu, poisson=a.poisson, dt=a.dt, sigma=a.sigma, cap_voxels=a.cap, tol=a.tol,
        max_outer=a.max_outer, gs_sweeps=a.gs_sweeps, levels=a.levels,
        distance_mode="shift_filtered" if a.distance == "shift-ssd" else "plain_ssd",
        intensity_range=a.intensity_range if a.intensity_range else None,
        sigma_per_level=bool(a.sigma_per_level))


def _fmt(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_rigid_params(path: Path, t: RigidTransform):
    text = (f"rotation_rad={_fmt(t.rotation)}\ntranslation_mm={_fmt(t.translation)}\n"
            f"center_mm={_fmt(t.center)}\n")
    try:
        Path(path).write_text(text, newline="")
    except OSError as exc:
        raise OSError(f"cannot write rigid parameters {path}: {exc}") from exc


def read_rigid_params(path: Path) -> RigidTransform:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read rigid parameters {path}: {exc}") from exc
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    try:
        vals = {k: tuple(float(x) for x in kv[k].split(","))
                for k in ("rotation_rad", "translation_mm", "center_mm")}
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: malformed rigid parameter file ({exc})") from None
    return RigidTransform(vals["rotation_rad"], vals["translation_mm"], vals["center_mm"])


def _read_scalar(path: Path, what: str) -> ScalarVolume:
    vol = read_vol3(path)
    if not isinstance(vol, ScalarVolume):
        raise UsageError(f"{what} {path} has 3 channels; expected a scalar volume")
    return vol


def _read_field(path: Path, what: str) -> DisplacementField:
    f = read_vol3(path)
    if not isinstance(f, DisplacementField):
        raise UsageError(f"{what} {path} has 1 channel; expected a displacement field")
    return f


def cmd_register(a) -> int:
    params = _params_from_args(a)
    fixed = _read_scalar(a.fixed, "fixed image")
    moving = _read_scalar(a.moving, "moving image")
    fixed.grid.check_same(moving.grid, "fixed and moving grids")
    run = register_pair(fixed, moving, params, rigid=a.rigid == "auto")
    res, rigid, rigid_time = run.result, run.rigid, run.rigid_time
    fwd, bwd = res.total_forward(), res.total_backward()
    for p in (a.out_forward, a.out_backward):
        p.parent.mkdir(parents=True, exist_ok=True)
    write_vol3(a.out_forward, fwd)
    write_vol3(a.out_backward, bwd)
    out_rigid = a.out_rigid or a.out_forward.with_name(a.out_forward.stem + "_rigid.txt")
    write_rigid_params(out_rigid, rigid or RigidTransform.identity())
    cons = consistency_stats(res.forward, res.backward)

    lines = ["command=register", f"fixed={a.fixed}", f"moving={a.moving}",
             f"rigid={a.rigid}", f"out_forward={a.out_forward}",
             f"out_backward={a.out_backward}", f"out_rigid={out_rigid}"]
    lines += [f"param.{k}={_fmt(v)}" for k, v in params.as_dict().items()]
    if rigid is not None:
        lines += [f"rigid.rotation_rad={_fmt(rigid.rotation)}",
                  f"rigid.translation_mm={_fmt(rigid.translation)}",
                  f"rigid.center_mm={_fmt(rigid.center)}"]
    for d in res.per_level:
        k = f"level.{d.level}"
        lines += [f"{k}.dims={_fmt(d.dims)}", f"{k}.outer_iterations={d.outer_iterations}",
                  f"{k}.final_force_norms={_fmt(d.final_force_norms)}",
                  f"{k}.converged={_fmt(d.converged)}",
                  f"{k}.oscillation_detected={_fmt(d.oscillation_detected)}"]
        for name, e in (("forward", d.energy), ("backward", d.energy_backward)):
            lines += [f"{k}.energy_{name}.{f}={_fmt(float(getattr(e, f)))}"
                      for f in ("distance", "elastic", "consistency")]
        lines.append(f"{k}.wall_time_s={d.wall_time:.3f}")
    lines += [f"consistency_mean_voxels={_fmt(cons[0])}",
              f"consistency_max_voxels={_fmt(cons[1])}",
              f"threads={numba.get_num_threads()}",
              f"rigid_time_s={rigid_time:.3f}", f"elastic_time_s={res.wall_time:.3f}",
              "timing_scope=wall clock including pyramid construction"]
    text = "\n".join(lines) + "\n"
    if a.report is not None:
        try:
            a.report.parent.mkdir(parents=True, exist_ok=True)
            a.report.write_text(text, newline="")
        except OSError as exc:
            raise OSError(f"cannot write report {a.report}: {exc}") from exc
    sys.stdout.write(text)
    return EXIT_OK


def cmd_warp(a) -> int:
    image = _read_scalar(a.image, "image")
    field = _read_field(a.field, "field")
    image.grid.check_same(field.grid, "image and field grids")
    a.out.parent.mkdir(parents=True, exist_ok=True)
    warped, _ = warp_volume(image, field)
    write_vol3(a.out, warped)
    print(a.out)
    return EXIT_OK


def _timings(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read register report {path}: {exc}") from exc
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    out = {}
    for stage in ("rigid", "elastic"):
        if f"{stage}_time_s" in kv:
            out[stage] = float(kv[f"{stage}_time_s"])
    if "elastic" in out:
        out["elastic"] += out.get("rigid", 0.0)
    return out


def cmd_eval(a) -> int:
    ff = read_fiducials(a.fid_fixed)
    fm = read_fiducials(a.fid_moving)
    times = _timings(a.register_report)
    rows = [ReportRow("unregistered", *fiducial_stats(ff, fm, None), 0.0)]
    if a.rigid_params is not None:
        t = read_rigid_params(a.rigid_params)
        rows.append(ReportRow("rigid", *fiducial_stats(ff, fm, t), times.get("rigid", 0.0)))
    if a.field is not None:
        f = _read_field(a.field, "field")
        rows.append(ReportRow("elastic", *fiducial_stats(ff, fm, f), times.get("elastic", 0.0)))
    report = AccuracyReport(rows, len(fiducial_distances(ff, fm)), {"timing_scope": TIMING_SCOPE})
    if a.report is not None:
        a.report.parent.mkdir(parents=True, exist_ok=True)
        write_report(report, a.report)
    sys.stdout.write(report_csv(report))
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "register": cmd_register, "warp": cmd_warp, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        numba.set_num_threads(resolve_threads(args.threads))
        return COMMANDS[args.command](args)
    except (UsageError, InvalidParameterError) as exc:
        print(f"elastreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GridMismatchError, PairingError, NumericalError, PhantomGenerationError) as exc:
        print(f"elastreg: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"elastreg: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
