"""Command line entry point: ``tvg simulate | run | eval | render | config``.

Exit codes: 0 success, 2 tracking failure, 3 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import RunConfig, load_config, save_config, to_ini
from .errors import ConfigError, TrackingFailure, TVGError
from .evaluation import evaluate
from .geom import Pose
from .pipeline import (load_image, open_source, read_tum, run_error_code, run_slam, write_dataset)
from .splat import load_ply, render, save_png

log = logging.getLogger("tvg")

EXIT_OK, EXIT_TRACKING, EXIT_IO = 0, 2, 3


def _config(path):
    return load_config(path) if path else RunConfig()


def cmd_simulate(args):
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    cfg.run.source = "simulate"
    cfg.validate()
    src = open_source(cfg)
    out = write_dataset(src.seq, args.out, cfg.run.fps, args.max_gap)
    save_config(cfg, Path(out) / "config.ini")
    log.info("wrote %d frames to %s", len(src.seq), out)
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args.config)
    if args.dataset:
        cfg.run.source, cfg.run.dataset_dir = "dataset", args.dataset
    if args.seed is not None:
        cfg.run.seed = args.seed
    for flag in ("disable_l2d", "disable_l3d", "disable_dart", "disable_tugi"):
        if getattr(args, flag):
            setattr(cfg.ablation, flag, True)
    if args.defer is not None:
        cfg.mapping = dataclasses.replace(cfg.mapping, mode="deferred", batch=args.defer)
    if args.no_plots:
        cfg.run.plots = False
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    res = run_slam(cfg, out_dir=out)
    if res.evaluation is not None:
        print(res.evaluation.summary(), end="")
    log.info("%d frames, %d keyframes, %d primitives -> %s", len(res.poses), len(res.keyframes),
             len(res.gmap), out)
    return EXIT_OK


def _associate(est_ts, gt_ts, tol=1e-6):
    """Index pairs with equal timestamps (relative tolerance)."""
    gt_ts = np.asarray(gt_ts, float)
    pairs = []
    for i, t in enumerate(est_ts):
        j = int(np.argmin(np.abs(gt_ts - t)))
        if abs(gt_ts[j] - t) <= tol * max(1.0, abs(t)):
            pairs.append((i, j))
    return pairs


def _image_files(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise ConfigError(f"image directory {folder} does not exist")
    stems = sorted({p.stem for p in folder.iterdir() if p.suffix in (".png", ".tvgf")})
    if not stems:
        raise ConfigError(f"no .png or .tvgf images in {folder}")
    return stems


def cmd_eval(args):
    est_ts, est = read_tum(args.est)
    gt_ts, gt = read_tum(args.gt)
    pairs = _associate(est_ts, gt_ts)
    if len(pairs) < 2:
        raise ConfigError("fewer than two poses share timestamps between the trajectories")
    est_m = [est[i] for i, _ in pairs]
    gt_m = [gt[j] for _, j in pairs]
    rendered = targets = None
    if args.images:
        targets_dir = Path(args.targets) if args.targets else Path(args.gt).parent / "frames"
        stems = _image_files(args.images)
        rendered = [load_image(Path(args.images) / s) for s in stems]
        targets = [load_image(targets_dir / s) for s in stems]
    rep = evaluate(est_m, gt_m, rendered, targets, align=args.align)
    print(rep.summary(), end="")
    if args.out:
        rep.to_csv(args.out)
    return EXIT_OK


def parse_pose(text):
    """``tx ty tz qx qy qz qw`` (world-from-camera, TUM order) -> Pose."""
    try:
        v = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad pose {text!r}: {exc}") from None
    if len(v) != 7 or not np.all(np.isfinite(v)) or np.linalg.norm(v[3:]) < 1e-12:
        raise ConfigError(f"pose needs 7 finite numbers 'tx ty tz qx qy qz qw', got {text!r}")
    q = np.array(v[3:]) / np.linalg.norm(v[3:])
    return Pose(Rotation.from_quat(q).as_matrix(), np.array(v[:3]))


def cmd_render(args):
    cfg = _config(args.config)
    cam = cfg.camera
    for name in ("width", "height", "focal"):
        if getattr(args, name) is not None:
            setattr(cam, name, getattr(args, name))
    pose = parse_pose(args.pose)
    try:
        gmap = load_ply(args.map)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read map {args.map}: {exc}") from None
    img = render(gmap, pose.inverse(), cam.intrinsics(), cfg.tracker.background).color
    save_png(img, args.out)
    return EXIT_OK


def cmd_config(args):
    cfg = _config(args.config)
    if args.out:
        save_config(cfg, args.out)
    else:
        print(to_ini(cfg), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="tvg", description="Tri-view Gaussian splatting SLAM on synthetic data.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset directory")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-gap", type=int, default=12, help="largest frame gap with a match file")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="track and map a sequence")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", help="dataset directory (overrides run.source)")
    r.add_argument("--seed", type=int)
    r.add_argument("--disable-l2d", action="store_true")
    r.add_argument("--disable-l3d", action="store_true")
    r.add_argument("--disable-dart", action="store_true")
    r.add_argument("--disable-tugi", action="store_true")
    r.add_argument("--defer", type=int, metavar="B", help="deferred mapping with batch size B")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE / RPE (and PSNR / SSIM with --images)")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--images", help="rendered frames, matched by file name against --targets")
    e.add_argument("--targets", help="target frames (default: frames/ next to the ground truth file)")
    e.add_argument("--align", choices=("sim3", "se3", "none"), default="sim3")
    e.add_argument("--out", help="per-frame CSV")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("render", help="render a PLY map from one pose")
    d.add_argument("--map", required=True)
    d.add_argument("--pose", required=True, help="'tx ty tz qx qy qz qw', world-from-camera")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--width", type=int)
    d.add_argument("--height", type=int)
    d.add_argument("--focal", type=float)
    d.set_defaults(func=cmd_render)

    c = sub.add_parser("config", help="print or write a config file with every key")
    c.add_argument("--config", help="start from this file instead of the defaults")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrackingFailure as exc:
        print(f"tvg: tracking failure: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (ConfigError, OSError, TVGError, ValueError) as exc:
        print(f"tvg: error: {exc}", file=sys.stderr)
        return run_error_code(exc)


if __name__ == "__main__":
    sys.exit(main())
