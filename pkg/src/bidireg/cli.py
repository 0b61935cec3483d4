"""Command-line front end.

Subcommands: register, synth, eval, selfcheck, report. Config precedence
for register is defaults < config file (JSON/TOML) < flags. Exit codes:
0 success, 1 argument/IO errors, 2 optimization divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as bio
from . import report as brep
from .field import warp
from .metrics import evaluate_registration
from .optim import DivergenceError, RegistrationConfig, register_multichannel
from .selfcheck import run_selfcheck
from .synth import SynthConfig, make_case, write_case
from .volume import Volume, normalize_intensity


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this tool reserves 2 for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config_file(path):
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(path.read_text())
    return json.loads(path.read_text())


def _parse_floats(text):
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text):
    return tuple(int(v) for v in text.split(","))


def _build_config(args) -> RegistrationConfig:
    d = {}
    if args.config:
        d.update(_load_config_file(args.config))
    overrides = {
        "lambda_reg": args.lambda_reg,
        "lambda_inv": args.lambda_inv,
        "lambda_m": args.lambda_m,
        "alpha": args.alpha,
        "p": args.p,
        "ncc_radius": args.ncc_radius,
        "learning_rate": args.learning_rate,
        "mask_warmup_iters": args.warmup,
        "seed": args.seed,
        "grad_smooth_sigma": args.grad_smooth_sigma,
    }
    if args.levels is not None:
        overrides["pyramid_scales"] = _parse_floats(args.levels)
    if args.iters is not None:
        overrides["iters_per_level"] = _parse_ints(args.iters)
    if args.no_masking:
        overrides["masking"] = False
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RegistrationConfig.from_dict(d)


def _manifest(command, argv, config, inputs, outputs, seed, wall_time):
    return {
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {str(p): bio.sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "seed": seed,
        "wall_time": wall_time,
    }


def cmd_register(args, argv):
    moving_paths = [Path(p) for p in args.moving.split(",")]
    fixed_paths = [Path(p) for p in args.fixed.split(",")]
    if len(moving_paths) != len(fixed_paths):
        print("error: --moving and --fixed need the same channel count",
              file=sys.stderr)
        return 1
    channels = (args.channels.split(",") if args.channels
                else [f"ch{i}" for i in range(len(moving_paths))])
    if len(channels) != len(moving_paths):
        print("error: --channels count does not match the volume lists",
              file=sys.stderr)
        return 1

    cfg = _build_config(args)
    moving = [normalize_intensity(bio.load_volume(p)) for p in moving_paths]
    fixed = [normalize_intensity(bio.load_volume(p)) for p in fixed_paths]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out / "trace.jsonl"

    def write_trace(rows):
        with open(trace_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")

    t0 = time.perf_counter()
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                result = register_multichannel(moving, fixed, cfg)
        else:
            result = register_multichannel(moving, fixed, cfg)
    except DivergenceError as e:
        write_trace(e.trace)
        print(f"error: optimization diverged: {e}", file=sys.stderr)
        print(f"trace written to {trace_path}", file=sys.stderr)
        return 2

    outputs = []

    def emit(name, writer, *a):
        path = out / name
        writer(*a, path)
        outputs.append(path)

    emit("disp_fwd.raw", bio.write_field_raw, result.disp_fwd)
    emit("disp_bwd.raw", bio.write_field_raw, result.disp_bwd)
    sp = fixed[0].spacing
    emit("mask_fwd.nii", bio.write_volume_nifti,
         Volume(result.mask_fwd.data.astype(np.float64), sp))
    emit("mask_bwd.nii", bio.write_volume_nifti,
         Volume(result.mask_bwd.data.astype(np.float64), sp))
    emit("fberr_fwd.nii", bio.write_volume_nifti, result.fb_err_fwd)
    emit("fberr_bwd.nii", bio.write_volume_nifti, result.fb_err_bwd)
    for ch, mov, fix in zip(channels, moving, fixed):
        suffix = f"_{ch}" if len(channels) > 1 else ""
        emit(f"warped_moving{suffix}.nii", bio.write_volume_nifti,
             warp(mov, result.disp_fwd))
        emit(f"warped_fixed{suffix}.nii", bio.write_volume_nifti,
             warp(fix, result.disp_bwd))
    write_trace(result.trace)
    outputs.append(trace_path)

    wall = time.perf_counter() - t0
    bio.write_manifest(out / "manifest.json", _manifest(
        "register", argv, cfg.to_dict(), moving_paths + fixed_paths,
        outputs, cfg.seed, wall))
    print(f"registered in {wall:.1f}s -> {out}")
    return 0


def cmd_synth(args, argv):
    d = {}
    if args.dims is not None:
        dims = _parse_ints(args.dims)
        d["dims"] = dims * 3 if len(dims) == 1 else dims
    for key, val in (("seed", args.seed), ("field_amplitude", args.amplitude),
                     ("field_smoothness", args.sigma),
                     ("lesion_count", args.lesions),
                     ("lesion_radius", args.radius),
                     ("cavity_intensity", args.cavity_intensity),
                     ("n_landmarks", args.landmarks),
                     ("texture", args.texture)):
        if val is not None:
            d[key] = val
    t0 = time.perf_counter()
    cfg = SynthConfig(**d)
    case = make_case(cfg)
    out = Path(args.out)
    write_case(case, out)
    outputs = sorted(out.iterdir())
    bio.write_manifest(out / "manifest.json", _manifest(
        "synth", argv, cfg.to_dict(), [], outputs, cfg.seed,
        time.perf_counter() - t0))
    print(f"wrote case to {out}")
    return 0


def cmd_eval(args, argv):
    t0 = time.perf_counter()
    disp = bio.read_field_raw(args.disp)
    lms_fixed = bio.read_landmarks_csv(args.fixed_landmarks, "followup")
    lms_moving = bio.read_landmarks_csv(args.moving_landmarks, "baseline")
    tumor = bio.load_volume(args.tumor_mask) if args.tumor_mask else None
    rep = evaluate_registration(disp, lms_fixed, lms_moving, tumor_mask=tumor,
                                wall_time=args.wall_time or 0.0)
    out = Path(args.out) if args.out else Path(args.disp).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    (out / "metrics.csv").write_text(rep.csv_row())
    bio.write_manifest(out / "eval_manifest.json", _manifest(
        "eval", argv, {}, [args.disp, args.fixed_landmarks, args.moving_landmarks]
        + ([args.tumor_mask] if args.tumor_mask else []),
        [out / "metrics.json", out / "metrics.csv"], 0,
        time.perf_counter() - t0))
    print(f"TRE mean {rep.tre_mean:.3f} mm (std {rep.tre_std:.3f}), "
          f"robustness {rep.robustness:.2f}, %|J|<=0 {rep.neg_jac_pct:.3f}")
    if rep.excluded_ids:
        print(f"excluded landmarks (outside extent): {rep.excluded_ids}")
    return 0


def cmd_selfcheck(args, argv):
    results = run_selfcheck(quick=args.quick, seed=args.seed or 0)
    all_ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"  ({r.detail})" if r.detail else ""
        print(f"[{status}] {r.name}{detail}")
        all_ok = all_ok and r.passed
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if all_ok else 1


def cmd_report(args, argv):
    written = brep.render_run_report(args.run, args.out)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser():
    parser = _Parser(prog="bidireg",
                     description="Bidirectional deformable registration with "
                                 "absent-correspondence masking")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("register", help="register a moving/fixed volume pair")
    p.add_argument("--fixed", required=True,
                   help="fixed (follow-up) volume; comma-separate channels")
    p.add_argument("--moving", required=True,
                   help="moving (baseline) volume; comma-separate channels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON or TOML config file")
    p.add_argument("--channels", help="channel names, e.g. t1ce,t2")
    p.add_argument("--lambda-reg", type=float, dest="lambda_reg")
    p.add_argument("--lambda-inv", type=float, dest="lambda_inv")
    p.add_argument("--lambda-m", type=float, dest="lambda_m")
    p.add_argument("--alpha", type=float, help="fb tolerance, full-res voxels")
    p.add_argument("--p", type=int, help="mask filter half-width")
    p.add_argument("--levels", help="pyramid scales, e.g. 0.25,0.5,1")
    p.add_argument("--iters", help="iterations per level, e.g. 200,150,100")
    p.add_argument("--seed", type=int)
    p.add_argument("--ncc-radius", type=int, dest="ncc_radius")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--warmup", type=int, help="mask warmup iterations")
    p.add_argument("--grad-smooth-sigma", type=float, dest="grad_smooth_sigma")
    p.add_argument("--no-masking", action="store_true",
                   help="disable mask estimation (ablation)")
    p.add_argument("--threads", type=int, help="cap worker threads")
    p.add_argument("--trace", help="path for the JSON-lines iteration trace")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="generate a synthetic case directory")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", help="e.g. 64 or 64,64,48")
    p.add_argument("--seed", type=int)
    p.add_argument("--lesions", type=int)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--cavity-intensity", type=float, dest="cavity_intensity")
    p.add_argument("--landmarks", type=int)
    p.add_argument("--texture", choices=["blobs", "checker-smooth"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compute metrics for a registration")
    p.add_argument("--disp", required=True, help="forward field (.raw)")
    p.add_argument("--fixed-landmarks", required=True, dest="fixed_landmarks")
    p.add_argument("--moving-landmarks", required=True, dest="moving_landmarks")
    p.add_argument("--tumor-mask", dest="tumor_mask",
                   help="moving-frame tumor mask for the 30 mm near/far split")
    p.add_argument("--out", help="output directory (default: next to --disp)")
    p.add_argument("--wall-time", type=float, dest="wall_time")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the built-in verification suite")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("report", help="render figures and CSV from a run dir")
    p.add_argument("--run", required=True, help="registration output directory")
    p.add_argument("--out", help="where to write (default: the run dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
