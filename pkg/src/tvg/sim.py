"""Synthetic scenes, camera trajectories, ground-truth images and noisy
scale-ambiguous pairwise pointmaps standing in for a dense two-view matcher.

Every output is a pure function of its spec and seed. Per-pair randomness is
drawn from ``SeedSequence([seed, stream, a, b])`` so pairs can be generated in
any order. Pixel noise is drawn per frame (not per pair) so that the pixel of a
point in frame k is the same in every pair that contains k, which is what lets
two pairs bridge through k.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, Pose, project_points, so3_exp, so3_log
from .matching import PairwiseMatchSet
from .splat import GaussianMap, logit, render

_PIXEL_STREAM, _PAIR_STREAM = 1, 2


@dataclass
class SceneSpec:
    seed: int = 0
    count: int = 600
    extent: float = 1.0  # side of the cube holding all means
    center: tuple = (0.0, 0.0, 3.0)
    scale_range: tuple = (0.008, 0.02)
    opacity_range: tuple = (0.75, 0.95)
    color_scheme: str = "random"  # random | smooth | gray
    background: float = 0.5

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("scene needs at least one primitive")
        if self.extent <= 0:
            raise ValueError("scene extent must be positive")
        if self.color_scheme not in ("random", "smooth", "gray"):
            raise ValueError(f"unknown color scheme {self.color_scheme!r}")


@dataclass
class NoiseModel:
    sigma_px: float = 0.0
    sigma_pt: float = 0.0  # fraction of depth
    outlier_fraction: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    drop_rate: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must satisfy 0 < lo <= hi")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier fraction must lie in [0, 1)")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop rate must lie in [0, 1)")
        if self.sigma_px < 0 or self.sigma_pt < 0:
            raise ValueError("noise levels must be nonnegative")

    @classmethod
    def moderate(cls):
        """Depth noise 1%, 10% outliers and per-pair scale jitter; pixels stay exact."""
        return cls(sigma_px=0.0, sigma_pt=0.01, outlier_fraction=0.1, scale_range=(0.5, 2.0))


@dataclass
class TrajectoryParams:
    step: float = 0.015
    start: tuple = (-0.45, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)
    target: tuple = (0.0, 0.0, 3.0)
    radius: float = 3.0
    arc_step_deg: float = 0.5
    max_rot_deg: float = 3.0
    seed: int = 0


@dataclass
class PairTruth:
    """Oracle-only bookkeeping of a generated pair; never handed to the pipeline."""
    point_ids: np.ndarray
    outlier: np.ndarray
    scale: float


def gen_scene(spec):
    """Ground-truth Gaussian map and the point cloud the matcher samples (the means)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    n = spec.count
    half = spec.extent / 2
    means = np.asarray(spec.center, float) + rng.uniform(-half, half, (n, 3))
    scales = rng.uniform(*spec.scale_range, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    if spec.color_scheme == "random":
        colors = rng.uniform(0, 1, (n, 3))
    elif spec.color_scheme == "smooth":
        phase = rng.uniform(0, 2 * np.pi, 3)
        u = (means - np.asarray(spec.center)) / spec.extent
        colors = 0.5 + 0.45 * np.sin(4 * u[:, [0, 1, 2]] * np.pi + phase)
    else:
        colors = np.repeat(rng.uniform(0, 1, (n, 1)), 3, axis=1)
    ops = logit(rng.uniform(*spec.opacity_range, n))
    gmap = GaussianMap(means, scales, q, np.clip(colors, 0, 1), ops)
    return gmap, means.copy()


def _look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-from-camera rotation with +z toward ``target`` and +y roughly along -up."""
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def gen_trajectory(kind, n_frames, params=None):
    """World-from-camera poses for a named trajectory family."""
    p = params or TrajectoryParams()
    n = int(n_frames)
    if kind == "line_low_parallax":
        start, d = np.asarray(p.start, float), np.asarray(p.direction, float)
        d = d / np.linalg.norm(d)
        return [Pose(np.eye(3), start + (i * p.step) * d) for i in range(n)]
    if kind == "arc":
        target = np.asarray(p.target, float)
        poses = []
        for i in range(n):
            th = np.radians(p.arc_step_deg) * i
            c = target + p.radius * np.array([np.sin(th), 0.0, -np.cos(th)])
            poses.append(Pose(_look_at(c, target), c))
        return poses
    if kind == "handheld_aggressive":
        rng = np.random.default_rng(np.random.SeedSequence([p.seed, 3]))
        max_rot = np.radians(p.max_rot_deg)
        R, c = np.eye(3), np.asarray(p.start, float).copy()
        poses = [Pose(R, c.copy())]
        for _ in range(n - 1):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            # pull back toward the base orientation so the scene stays in view
            delta = -0.2 * so3_log(R) + axis * rng.uniform(0, max_rot)
            ang = np.linalg.norm(delta)
            if ang > max_rot:
                delta *= max_rot / ang
            R = so3_exp(delta) @ R
            c = c + p.step * (np.asarray(p.direction, float) + rng.normal(scale=0.5, size=3))
            poses.append(Pose(R, c.copy()))
        return poses
    raise ValueError(f"unknown trajectory kind {kind!r}")


def _frame_pixel_noise(seed, frame, n_points, sigma):
    if sigma == 0:
        return np.zeros((n_points, 2))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PIXEL_STREAM, frame]))
    return rng.normal(scale=sigma, size=(n_points, 2))


def gen_pair_matches(points, pose_a, pose_b, K, noise, seed, frames=(0, 1)):
    """Noisy scale-ambiguous matches of co-visible scene points between two views.

    ``pose_a``/``pose_b`` are world-from-camera; ``frames`` are the frame ids
    used for the match set and for the per-frame and per-pair seed streams.
    Returns (PairwiseMatchSet, PairTruth).
    """
    a, b = int(frames[0]), int(frames[1])
    pts = np.asarray(points, float).reshape(-1, 3)
    cw_a, cw_b = pose_a.inverse(), pose_b.inverse()
    uv_a, z_a, _ = project_points(K, cw_a, pts)
    uv_b, z_b, _ = project_points(K, cw_b, pts)
    vis = (z_a > 1e-6) & (z_b > 1e-6) & K.in_bounds(uv_a) & K.in_bounds(uv_b)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PAIR_STREAM, a, b]))
    lo, hi = noise.scale_range
    s = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    ids = np.flatnonzero(vis)
    if noise.drop_rate > 0 and len(ids):
        ids = ids[rng.uniform(size=len(ids)) >= noise.drop_rate]
    n = len(ids)
    if n == 0:
        warnings.warn(f"frames {a} and {b} share no visible scene points", RuntimeWarning, stacklevel=2)
        empty = PairwiseMatchSet(a, b)
        return empty, PairTruth(np.zeros(0, int), np.zeros(0, bool), s)
    px_a = uv_a[ids] + _frame_pixel_noise(seed, a, len(pts), noise.sigma_px)[ids]
    px_b = uv_b[ids] + _frame_pixel_noise(seed, b, len(pts), noise.sigma_px)[ids]
    Pa, Pb = cw_a.apply(pts[ids]), cw_b.apply(pts[ids])
    if noise.sigma_px > 0:
        # a pointmap is read at the matched pixel, so its point sits on that pixel's ray
        Pa = K.normalize(px_a) * Pa[:, 2:3]
        Pb = K.normalize(px_b) * Pb[:, 2:3]
    if noise.sigma_pt > 0:
        # depth error along each viewing ray, standard deviation sigma_pt * depth
        Pa = Pa * (1.0 + noise.sigma_pt * rng.normal(size=(n, 1)))
        Pb = Pb * (1.0 + noise.sigma_pt * rng.normal(size=(n, 1)))
    conf = rng.uniform(0.6, 1.0, n)
    outlier = np.zeros(n, bool)
    n_out = int(np.floor(noise.outlier_fraction * n))
    if n_out:
        sel = rng.choice(n, size=n_out, replace=False)
        outlier[sel] = True
        zlo, zhi = min(Pa[:, 2].min(), Pb[:, 2].min()), max(Pa[:, 2].max(), Pb[:, 2].max())
        px_b[sel] = rng.uniform([-0.5, -0.5], [K.width - 0.5, K.height - 0.5], (n_out, 2))
        Pb[sel] = K.normalize(px_b[sel]) * rng.uniform(zlo, zhi, (n_out, 1))
        rand_px = rng.uniform([-0.5, -0.5], [K.width - 0.5, K.height - 0.5], (n_out, 2))
        Pa[sel] = K.normalize(rand_px) * rng.uniform(zlo, zhi, (n_out, 1))
    # the matcher reports geometry up to its own per-pair scale
    mset = PairwiseMatchSet(a, b, px_a, px_b, s * Pa, s * Pb, conf)
    return mset, PairTruth(ids, outlier, s)


def render_ground_truth(scene, poses, K, background=0.5):
    """Ground-truth images for world-from-camera ``poses``."""
    return [render(scene, p.inverse(), K, background).color for p in poses]


@dataclass
class SimSequence:
    """A generated sequence with lazily generated, cached pairwise matches."""
    scene: GaussianMap
    points: np.ndarray
    poses: list
    images: list
    K: CameraIntrinsics
    noise: NoiseModel
    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.poses)

    def matches(self, a, b):
        key = (int(a), int(b))
        if key not in self._cache:
            self._cache[key] = gen_pair_matches(self.points, self.poses[a], self.poses[b], self.K, self.noise,
                                                self.seed, key)
        return self._cache[key][0]

    def truth(self, a, b):
        self.matches(a, b)
        return self._cache[(int(a), int(b))][1]


def make_sequence(scene_spec, kind, n_frames, K, noise=None, traj=None, seed=None):
    noise = noise or NoiseModel()
    scene, points = gen_scene(scene_spec)
    poses = gen_trajectory(kind, n_frames, traj)
    images = render_ground_truth(scene, poses, K, scene_spec.background)
    return SimSequence(scene, points, poses, images, K, noise, scene_spec.seed if seed is None else int(seed))
