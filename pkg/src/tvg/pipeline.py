"""Frame loop: matching, tri-view bridging, tracking, keyframe selection and mapping."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (AlignmentDegenerateError, ConfigError, InsufficientEvidenceError, TrackingFailure,
                     TVGError)
from .evaluation import evaluate
from .geom import Pose
from .mapping import (Keyframe, KeyframeRegistry, insert_keyframe, keyframe_decision, median_parallax,
                      refine_map, select_window)
from .matching import bridge_triplets, filter_parallax, load_matches, save_matches
from .sim import make_sequence
from .splat import GaussianMap, load_float_image, load_png, render, save_float_image, save_ply, save_png
from .splat.gaussians import atomic_write_text
from .tracking import TrackReport, TrackerState, estimate_pair_scale, initialize_pose, track_frame

log = logging.getLogger(__name__)

_REFINE_STREAM = 4


# --------------------------------------------------------------------------
# trajectory files
# --------------------------------------------------------------------------

def format_tum(timestamps, poses):
    lines = []
    for ts, p in zip(timestamps, poses):
        q = Rotation.from_matrix(p.R).as_quat()
        vals = [float(ts), *map(float, p.t), *map(float, q)]
        lines.append(" ".join(repr(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_tum(path, timestamps, poses):
    atomic_write_text(path, format_tum(timestamps, poses))


def parse_tum(text, source="<tum>"):
    """Rows ``timestamp tx ty tz qx qy qz qw``; '#' lines and blanks are skipped."""
    ts, poses = [], []
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) != 8:
            raise ConfigError(f"{source}:{no}: expected 8 fields, found {len(parts)}")
        try:
            v = [float(x) for x in parts]
        except ValueError as exc:
            raise ConfigError(f"{source}:{no}: {exc}") from None
        q = np.array(v[4:])
        if not np.all(np.isfinite(v)) or np.linalg.norm(q) < 1e-12:
            raise ConfigError(f"{source}:{no}: invalid pose values")
        ts.append(v[0])
        poses.append(Pose(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), np.array(v[1:4])))
    return ts, poses


def read_tum(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory {path}: {exc}") from None
    return parse_tum(text, str(path))


# --------------------------------------------------------------------------
# frame sources
# --------------------------------------------------------------------------

class SimSource:
    """Frames and matches generated in memory from the config's simulator settings."""

    def __init__(self, sequence, fps=30.0):
        self.seq = sequence
        self.K = sequence.K
        self.fps = fps

    def __len__(self):
        return len(self.seq)

    def image(self, i):
        return self.seq.images[i]

    def matches(self, a, b):
        return self.seq.matches(a, b)

    def timestamp(self, i):
        return i / self.fps

    @property
    def ground_truth(self):
        return self.seq.poses


class DatasetSource:
    """A directory written by ``simulate``: manifest.json, frames/, matches/, groundtruth.tum."""

    def __init__(self, root, K):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read dataset manifest in {self.root}: {exc}") from None
        self.K = K
        self.n = int(self.manifest["n_frames"])
        self.timestamps = [float(t) for t in self.manifest.get("timestamps", range(self.n))]
        gt = self.root / "groundtruth.tum"
        self._gt = read_tum(gt)[1] if gt.exists() else None

    def __len__(self):
        return self.n

    def image(self, i):
        return load_image(self.root / "frames" / f"{i:05d}")

    def matches(self, a, b):
        path = self.root / "matches" / match_filename(a, b)
        if not path.exists():
            raise ConfigError(f"missing match file {path}")
        return load_matches(path)

    def timestamp(self, i):
        return self.timestamps[i]

    @property
    def ground_truth(self):
        return self._gt


def load_image(base):
    """Float image from ``base`` with either a .tvgf or .png suffix (float dump preferred)."""
    base = Path(base)
    if base.suffix in (".tvgf", ".png"):
        base = base.with_suffix("")
    try:
        if base.with_suffix(".tvgf").exists():
            return load_float_image(base.with_suffix(".tvgf"))
        return load_png(base.with_suffix(".png"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read image {base}: {exc}") from None


def match_filename(a, b):
    return f"{a:05d}_{b:05d}.tvgm"


def open_source(cfg):
    K = cfg.camera.intrinsics()
    if cfg.run.source == "dataset":
        return DatasetSource(cfg.run.dataset_dir, K)
    seq = make_sequence(cfg.scene, cfg.run.trajectory, cfg.run.n_frames, K, cfg.noise, cfg.trajectory,
                        seed=cfg.run.seed)
    return SimSource(seq, cfg.run.fps)


def write_dataset(seq, out, fps=30.0, max_gap=12):
    """Dump a simulated sequence; match files cover every pair with gap <= ``max_gap``."""
    out = Path(out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "matches").mkdir(exist_ok=True)
    n = len(seq)
    ts = [i / fps for i in range(n)]
    for i, img in enumerate(seq.images):
        save_float_image(img, out / "frames" / f"{i:05d}.tvgf")
        save_png(img, out / "frames" / f"{i:05d}.png")
    pairs = []
    for a in range(n):
        for b in range(a + 1, min(n, a + max_gap + 1)):
            save_matches(seq.matches(a, b), out / "matches" / match_filename(a, b))
            pairs.append([a, b])
    write_tum(out / "groundtruth.tum", ts, seq.poses)
    save_ply(seq.scene, out / "groundtruth_map.ply")
    manifest = {
        "format": "tvg-dataset-1", "seed": seq.seed, "n_frames": n, "timestamps": ts,
        "camera": {"width": seq.K.width, "height": seq.K.height, "fx": seq.K.fx, "fy": seq.K.fy,
                   "cx": seq.K.cx, "cy": seq.K.cy},
        "noise": {"sigma_px": seq.noise.sigma_px, "sigma_pt": seq.noise.sigma_pt,
                  "outlier_fraction": seq.noise.outlier_fraction, "scale_range": list(seq.noise.scale_range),
                  "drop_rate": seq.noise.drop_rate},
        "pair_seed_streams": "SeedSequence([seed, 2, a, b]); pixel noise SeedSequence([seed, 1, frame])",
        "artifacts": {"groundtruth": "groundtruth.tum", "map": "groundtruth_map.ply",
                      "frames": [f"frames/{i:05d}.tvgf" for i in range(n)],
                      "frames_png": [f"frames/{i:05d}.png" for i in range(n)],
                      "matches": [f"matches/{match_filename(a, b)}" for a, b in pairs]},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    return out


# --------------------------------------------------------------------------
# SLAM loop
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    poses: list
    timestamps: list
    gmap: GaussianMap
    keyframes: KeyframeRegistry
    reports: dict = field(default_factory=dict)  # frame -> TrackReport
    lambda_log: list = field(default_factory=list)  # (frame, lambda_p, frames_since_insertion)
    insertions: list = field(default_factory=list)  # (frame, n_added)
    evaluation: object = None
    renders: list = field(default_factory=list)  # final-map renders at the estimated poses
    status: str = "ok"
    message: str = ""


class _Mapper:
    """Synchronous or batched keyframe insertion plus refinement."""

    def __init__(self, cfg, K, gmap, registry, state):
        self.cfg, self.K, self.gmap, self.reg, self.state = cfg, K, gmap, registry, state
        self.tugi = cfg.tugi_config()
        self.pending = []
        self.insertions = []

    def submit(self, frame, job):
        self.pending.append((frame, job))
        if self.cfg.mapping.mode == "sync":
            self.flush(frame)

    def maybe_flush(self, frame):
        if self.cfg.mapping.mode == "deferred" and self.pending and (frame + 1) % self.cfg.mapping.batch == 0:
            self.flush(frame)

    def flush(self, frame):
        for kf_frame, (trip, images, poses, scales) in self.pending:
            n = insert_keyframe(self.gmap, trip, images, poses, scales, self.tugi)
            self.insertions.append((kf_frame, n))
        self.pending = []
        if len(self.gmap) and self.cfg.refine.iterations > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.run.seed, _REFINE_STREAM, frame]))
            idx = select_window(len(self.reg), rng, self.cfg.refine.recent, self.cfg.refine.older)
            refine_map(self.gmap, self.reg.views(idx), self.K, self.cfg.refine)
        self.state.reset_keyframe_counter()


def _init_only_report(state, revision, s_pair):
    state.history.append(state.pose)
    state.frames_since_keyframe += 1
    e = np.zeros(0)
    return TrackReport(e, e, e, e, e, state.pose, 0, 0, 0, 0, False, 0, revision, float(s_pair),
                       ("init-only",))


def run_slam(cfg, source=None, out_dir=None):
    """Track every frame, grow and refine the map; optionally write all artifacts.

    On tracking failure the partial results are written (when ``out_dir`` is
    given) and the TrackingFailure is re-raised with ``.result`` attached.
    """
    cfg.validate()
    source = source or open_source(cfg)
    K = source.K
    tcfg = cfg.tracker_config()
    robust = tcfg.robust  # the squared variant also drops trimming in the alignments
    n = min(len(source), cfg.run.n_frames) if cfg.run.source == "simulate" else len(source)
    gmap = GaussianMap()
    reg = KeyframeRegistry()
    state = TrackerState(Pose.identity())
    mapper = _Mapper(cfg, K, gmap, reg, state)
    res = RunResult([], [], gmap, reg)
    since_kf = 0
    try:
        for t in range(n):
            img = source.image(t)
            res.timestamps.append(source.timestamp(t))
            if t == 0:
                pose = Pose.identity()
                state.pose = pose
                state.history.append(pose)
                reg.add(Keyframe(0, pose, img, None, gmap.revision, source.timestamp(0)))
                res.poses.append(pose)
                continue
            key = reg[-1]
            m_cur = source.matches(key.id, t)
            if len(reg) < 2:
                # bootstrap: the first pair fixes the world scale (s_acc = 1); no motion model to fall back on
                try:
                    pose = initialize_pose(m_cur, key.pose, state.accumulated_scale, None, robust)
                except (AlignmentDegenerateError, InsufficientEvidenceError) as exc:
                    raise TrackingFailure(f"frame {t}: cannot bootstrap ({exc})") from None
                state.pose = pose
                state.history.append(pose)
                reg.add(Keyframe(t, pose, img, m_cur, gmap.revision, source.timestamp(t)))
                res.poses.append(pose)
                since_kf = 0
                continue
            prev = reg[-2]
            trip_all = bridge_triplets(key.matches, m_cur, cfg.matching.join_tol)
            trip_conf = trip_all.subset(trip_all.confidence >= cfg.matching.min_confidence)
            try:
                s_pair = estimate_pair_scale(trip_conf, trimmed=robust)
            except (InsufficientEvidenceError, AlignmentDegenerateError):
                s_pair = 1.0  # keep the accumulated scale
            s_acc = state.accumulated_scale
            s_world = s_acc * s_pair
            try:
                state.pose = initialize_pose(m_cur, key.pose, s_world, state.history, robust)
            except (AlignmentDegenerateError, InsufficientEvidenceError) as exc:
                raise TrackingFailure(f"frame {t}: no initial pose ({exc})") from None
            trip_2d = filter_parallax(trip_all, prev.pose.inverse(), key.pose.inverse(), state.pose.inverse(),
                                      cfg.matching.min_parallax, cfg.matching.min_confidence, scale=s_acc,
                                      key_parallax=cfg.matching.key_parallax)
            lam_before = state.frames_since_keyframe
            if not len(gmap) and not (tcfg.use_2d or tcfg.use_3d):
                # geometry ablated and nothing rendered yet: keep the initialized pose
                rep = _init_only_report(state, gmap.revision, s_pair)
            else:
                rep = track_frame(img, trip_2d, gmap.snapshot() if len(gmap) else None, state, tcfg, K,
                                  prev.pose, key.pose, pair_scale=s_pair, triplets_3d=trip_conf)
            res.reports[t] = rep
            res.lambda_log.append((t, float(rep.lambda_p[0]) if rep.iterations else float("nan"), lam_before))
            pose = rep.pose
            res.poses.append(pose)
            since_kf += 1
            pts = key.pose.apply(m_cur.point_in_a * s_world)
            par = median_parallax(pts, key.pose.t, pose.t)
            # co-visible share of the keyframe's content; counts are unaffected by outliers
            overlap = len(m_cur) / max(1, len(key.matches))
            if keyframe_decision(since_kf, par, overlap, cfg.keyframe):
                reg.add(Keyframe(t, pose, img, m_cur, gmap.revision, source.timestamp(t)))
                job = (trip_conf, [prev.image, key.image, img], [prev.pose, key.pose, pose], (s_acc, s_world))
                state.accumulated_scale = s_world
                since_kf = 0
                mapper.submit(t, job)
            mapper.maybe_flush(t)
    except TrackingFailure as exc:
        res.status, res.message = "tracking-failure", str(exc)
        res.insertions = mapper.insertions
        if out_dir is not None:
            write_artifacts(res, cfg, K, source, out_dir, evaluate_run=False)
        exc.result = res
        raise
    if mapper.pending:
        mapper.flush(n - 1)
    res.insertions = mapper.insertions
    gt = source.ground_truth
    if gt is not None and len(gt) >= n and n >= 2:
        res.renders = [render(gmap, p.inverse(), K, tcfg.background).color for p in res.poses]
        res.evaluation = evaluate(res.poses, gt[:n], res.renders, [source.image(i) for i in range(n)])
    if out_dir is not None:
        write_artifacts(res, cfg, K, source, out_dir)
    return res


def write_artifacts(res, cfg, K, source, out_dir, evaluate_run=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", res.timestamps[:len(res.poses)], res.poses)
    save_ply(res.gmap, out / "map.ply")
    res.keyframes.to_csv(out / "keyframes.csv")
    rows = ["frame,iter,L_photo,L_2D,L_3D,lambda_p,total"]
    for frame in sorted(res.reports):
        for r in res.reports[frame].rows(frame):
            rows.append(f"{r[0]},{r[1]}," + ",".join(repr(float(v)) for v in r[2:]))
    atomic_write_text(out / "run_log.csv", "\n".join(rows) + "\n")
    frames = ["frame,lambda_p,frames_since_insertion,pair_scale,inliers_2d,outliers_2d,inliers_3d,outliers_3d,"
              "iterations,map_revision,flags"]
    for frame, lam, since in res.lambda_log:
        r = res.reports[frame]
        frames.append(f"{frame},{lam!r},{since},{r.pair_scale!r},{r.inliers_2d},{r.outliers_2d},{r.inliers_3d},"
                      f"{r.outliers_3d},{r.iterations},{r.map_revision},{'|'.join(r.flags)}")
    atomic_write_text(out / "frames.csv", "\n".join(frames) + "\n")
    status = {"status": res.status, "message": res.message, "frames_tracked": len(res.poses),
              "keyframes": len(res.keyframes), "primitives": len(res.gmap)}
    if res.evaluation is not None:
        ev = res.evaluation
        ev.to_csv(out / "eval.csv")
        atomic_write_text(out / "summary.txt", ev.summary())
        status.update(ate_rmse=ev.ate_rmse, rpe_trans=ev.rpe_trans, rpe_rot=ev.rpe_rot, psnr=ev.psnr_mean,
                      ssim=ev.ssim_mean)
    if res.renders:
        (out / "renders").mkdir(exist_ok=True)
        for i, img in enumerate(res.renders):
            save_png(img, out / "renders" / f"{i:05d}.png")
    atomic_write_text(out / "status.json", json.dumps(status, indent=1) + "\n")
    if cfg.run.plots:
        from .plotting import plot_run
        plot_run(res, source.ground_truth, out)
    return out


def run_error_code(exc):
    if isinstance(exc, TrackingFailure):
        return 2
    if isinstance(exc, (ConfigError, OSError, TVGError, ValueError)):
        return 3
    return 1
