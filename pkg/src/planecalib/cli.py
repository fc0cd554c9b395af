"""Command-line entry point: ``planecalib {synth,init,calibrate,evaluate,colorize}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io, pipeline, synth
from .config import PipelineConfig, apply_overrides, config_from_dict, merge_config
from .errors import CalibrationError, ParseError, SceneSpecError, SchemaError, UnsupportedLayout
from .metrics import calibration_error

log = logging.getLogger("planecalib")


class UsageError(Exception):
    pass


def _write(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    if args.spec:
        spec = synth.scene_from_dict(io.read_json(args.spec))
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = synth.default_scene(args.kind, args.seed or 0)
        spec.validate()
    if args.scale_factor is not None:
        spec.init.scale_factor = args.scale_factor
    ds = synth.generate(spec)
    data = pipeline.from_synthetic(ds)
    if args.with_lidar_poses:
        data.lidar_poses = ds.gt_lidar_poses
    images = [synth.render_image(ds, i, checker=args.checker) for i in range(ds.n_frames)] if args.images else None
    manifest = io.save_dataset(data, args.out, images=images)
    print(f"wrote {manifest} ({ds.n_frames} frames, {len(ds.tracks)} tracks)")
    return pipeline.EXIT_OK


# ---------------------------------------------------------------------------
# calibrate / init


def _effective_config(args, dataset) -> PipelineConfig:
    """Defaults, then the manifest's config block, then ``--config``, then ``--set``."""
    cfg = config_from_dict(dataset.config, "manifest config")
    if args.config:
        merge_config(cfg, io.read_json(args.config), args.config)
    apply_overrides(cfg, args.set)
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _run(args, stop):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise UsageError(f"manifest {manifest} does not exist")
    dataset = io.load_dataset(manifest)
    cfg = _effective_config(args, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = getattr(args, "start", None) or "lidar"
    try:
        report, timings, _ = pipeline.run_pipeline(dataset, cfg, checkpoint_dir=out / "checkpoints", start=start, stop=stop)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    report.save(out / "report.json")
    _write(out / "timings.json", timings)
    if report.result is not None:
        D = io.intrinsics_from_dict(report.result["intrinsics"])
        X = io.se3_from_dict(report.result["extrinsics"])
        io.save_params(out / "params.json", D, X, report.result.get("scale"))
    print(f"status: {report.status}")
    if report.error:
        print(f"{report.error['stage']}: {report.error['type']}: {report.error['message']}")
    if report.degeneracy and report.degeneracy.get("status") == "degenerate":
        print("weak direction: " + " ".join(f"{v:.4f}" for v in report.degeneracy["weak_direction"]))
    if report.evaluation:
        for stage, err in report.evaluation.items():
            if isinstance(err, dict):
                print(f"{stage:>8}: E_R {err['rotation_deg']:.4f} deg  E_t {err['translation_cm']:.3f} cm  E_D {err['intrinsic_px']:.3f} px")
    return report.exit_code


def cmd_calibrate(args):
    return _run(args, "joint")


def cmd_init(args):
    return _run(args, "init")


# ---------------------------------------------------------------------------
# evaluate / colorize


def cmd_evaluate(args):
    D, X, _ = io.load_params(args.params)
    Dg, Xg, _ = io.load_params(args.gt)
    err = calibration_error(X, D, Xg, Dg, args.stride)
    print(f"E_R {err.rotation_deg!r} deg")
    print(f"E_t {err.translation_cm!r} cm")
    print(f"E_D {err.intrinsic_px!r} px")
    if args.out:
        _write(args.out, {"format_version": 1, "stride": args.stride, **err.to_dict()})
    return pipeline.EXIT_OK


def cmd_colorize(args):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise UsageError(f"manifest {manifest} does not exist")
    dataset = io.load_dataset(manifest)
    if dataset.images is None:
        raise UsageError("manifest has no images to colorize with")
    if not 0 <= args.frame < dataset.n_frames:
        raise UsageError(f"frame {args.frame} out of range (dataset has {dataset.n_frames})")
    D, X, _ = io.load_params(args.params)
    image = io.load_ppm(dataset.images[args.frame])
    colored = io.colorize(dataset.clouds[args.frame], image, D, X)
    colored.save(args.out)
    print(f"colored {int(colored.colored.sum())} of {len(colored.colored)} points -> {args.out}")
    return pipeline.EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="planecalib", description="Targetless LiDAR-camera calibration from planar structure.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--spec", help="scene description (JSON)")
    src.add_argument("--kind", default="courtyard", choices=sorted(synth.SCENES))
    s.add_argument("--seed", type=int)
    s.add_argument("--scale-factor", type=float, help="initial scale as a multiple of the true one")
    s.add_argument("--with-lidar-poses", action="store_true", help="ship ground-truth LiDAR poses as provided odometry")
    s.add_argument("--images", action="store_true", help="render PPM images for colorization")
    s.add_argument("--checker", type=float, default=0.0, help="checkerboard cell size for rendered textures (m)")
    s.add_argument("out")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("calibrate", cmd_calibrate, "run the full pipeline"), ("init", cmd_init, "run up to scale and extrinsic initialization")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("manifest")
        c.add_argument("--out", required=True)
        c.add_argument("--config", help="pipeline configuration (JSON)")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
        c.add_argument("--threads", type=int)
        if name == "calibrate":
            c.add_argument("--from", dest="start", choices=pipeline.STAGES, default="lidar", help="resume from a checkpointed stage")
        c.set_defaults(func=func)

    e = sub.add_parser("evaluate", help="compare parameters against ground truth")
    e.add_argument("params")
    e.add_argument("gt", help="parameter file or manifest with a gt block")
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("colorize", help="color one LiDAR scan from its image")
    k.add_argument("manifest")
    k.add_argument("--params", required=True)
    k.add_argument("--frame", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_colorize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_USAGE
    except (ParseError, SchemaError, UnsupportedLayout, SceneSpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_IO
    except CalibrationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return pipeline.EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
