"""Keyframes, tri-view uncertainty, uncertainty-guided Gaussian initialization
and windowed map refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, InsufficientEvidenceError
from .geom import Pose
from .optim import Adam
from .splat import DEFAULT_BACKGROUND, GaussianMap, GaussianPrimitive, logit, map_gradients, map_loss, sigmoid


@dataclass
class Keyframe:
    id: int
    pose: Pose  # world-from-camera
    image: np.ndarray
    matches: Optional[object] = None  # PairwiseMatchSet to the previous keyframe
    revision: int = -1
    timestamp: float = 0.0


@dataclass(frozen=True)
class UncertaintyEstimate:
    mean: np.ndarray
    variance: float
    count: int


@dataclass
class TugiConfig:
    a: float = 0.7
    k_op: Optional[float] = None  # defaults to reaching the clamp at 10% of the scene extent
    c_s: float = 1.0
    s_floor: float = 1e-3
    s_ceil: Optional[float] = None  # defaults to 10% of the scene extent
    eps: float = 1e-4
    extent: float = 1.0
    enabled: bool = True
    fixed_scale: float = 0.01  # used when uncertainty guidance is disabled
    dup_floor: float = 0.02  # lower bound on the duplicate radius, scene units

    def __post_init__(self):
        if self.k_op is None:
            self.k_op = (1.0 - self.eps / self.a) / (0.1 * self.extent)
        if self.s_ceil is None:
            self.s_ceil = 0.1 * self.extent
        if not self.eps < self.a < 1 - self.eps:
            raise ConfigError("base opacity a must lie in (eps, 1 - eps)")
        if self.k_op < 0 or self.c_s <= 0 or self.s_floor <= 0:
            raise ConfigError("k_op must be >= 0, c_s and s_floor > 0")
        if self.s_ceil < self.s_floor:
            raise ConfigError("s_ceil must be >= s_floor")


@dataclass
class KeyframePolicy:
    theta_kf: float = 2.0  # degrees
    rho_kf: float = 0.85
    n_max: int = 10


@dataclass
class RefineConfig:
    iterations: int = 80
    gamma: float = 0.2
    lr_means: float = 1.6e-4
    lr_log_scales: float = 0.05
    lr_quats: float = 0.01
    lr_colors: float = 0.02
    lr_opacity: float = 0.05
    recent: int = 5
    older: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_tol: float = 1e-12
    background: float = DEFAULT_BACKGROUND


# --------------------------------------------------------------------------
# tri-view uncertainty and TUGI
# --------------------------------------------------------------------------

def triview_uncertainty(samples):
    """Centroid and isotropic variance ``(1/N) sum |P_i - P_bar|^2`` of N >= 2 samples."""
    P = np.asarray(samples, dtype=float).reshape(-1, 3)
    P = P[np.all(np.isfinite(P), axis=1)]
    if len(P) < 2:
        raise InsufficientEvidenceError(f"need at least 2 valid samples, got {len(P)}")
    # deviations from the first sample: identical samples give exactly zero variance
    d = P - P[0]
    dm = d.mean(axis=0)
    var = float(np.mean(np.sum((d - dm) ** 2, axis=1)))
    mean = P[0] + dm
    return UncertaintyEstimate(mean, var, len(P))


def triview_uncertainty_batch(samples):
    """Vectorized form over (m, N, 3) samples; non-finite samples are ignored.

    Returns (means (m, 3), variances (m,), counts (m,)); rows with fewer than
    two valid samples get NaN statistics.
    """
    S = np.asarray(samples, dtype=float)
    ok = np.all(np.isfinite(S), axis=2)
    cnt = ok.sum(axis=1)
    first = S[np.arange(len(S)), np.argmax(ok, axis=1)] if len(S) else np.zeros((0, 3))
    D = np.where(ok[..., None], S - first[:, None, :], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        dm = D.sum(axis=1) / cnt[:, None]
        d = np.where(ok[..., None], D - dm[:, None, :], 0.0)
        var = np.sum(d * d, axis=(1, 2)) / cnt
        mean = first + dm
    bad = cnt < 2
    mean[bad] = np.nan
    var[bad] = np.nan
    return mean, var, cnt


def tugi_params(variances, cfg):
    """Scale and opacity logit for each variance."""
    sd = np.sqrt(np.maximum(np.asarray(variances, dtype=float), 0.0))
    if not cfg.enabled:
        return np.full(sd.shape, cfg.fixed_scale), np.full(sd.shape, float(logit(cfg.a)))
    # the ceiling only bounds render cost: by then the opacity sits at its clamp
    scale = np.clip(cfg.c_s * sd, cfg.s_floor, cfg.s_ceil)
    op = np.clip(cfg.a * (1.0 - cfg.k_op * sd), cfg.eps, 1.0 - cfg.eps)
    return scale, logit(op)


def tugi_init(estimate, colors, cfg=None):
    """One isotropic Gaussian at the fused point, sized and faded by its uncertainty."""
    cfg = cfg or TugiConfig()
    scale, op_logit = tugi_params(np.array([estimate.variance]), cfg)
    color = np.mean(np.asarray(colors, dtype=float).reshape(-1, 3), axis=0)
    return GaussianPrimitive(estimate.mean, np.full(3, scale[0]), [1.0, 0, 0, 0], color, float(op_logit[0]))


def sample_bilinear(image, pixels):
    """Bilinear lookup at (x, y) pixel coordinates with integer pixel centers, clamped at borders."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape[:2]
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    x = np.clip(px[:, 0], 0, W - 1)
    y = np.clip(px[:, 1], 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2) if W > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), H - 2) if H > 1 else np.zeros(len(y), int)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


# --------------------------------------------------------------------------
# keyframes and insertion
# --------------------------------------------------------------------------

def median_parallax(points_world, center_a, center_b):
    """Median angle (degrees) at the points between rays to two camera centers."""
    P = np.asarray(points_world, dtype=float).reshape(-1, 3)
    if not len(P):
        return 0.0
    r1, r2 = P - center_a, P - center_b
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(r1, r2), axis=1), np.sum(r1 * r2, axis=1)))
    return float(np.median(ang))


def keyframe_decision(frames_since_keyframe, parallax_deg, overlap_ratio, policy=None, first=False):
    """New keyframe iff first frame, enough parallax, too little overlap, or too long since the last."""
    policy = policy or KeyframePolicy()
    if first:
        return True
    return bool(parallax_deg > policy.theta_kf or overlap_ratio < policy.rho_kf
                or frames_since_keyframe >= policy.n_max)


def triplet_samples(triplets, scale_prev, scale_cur, key_from_cur):
    """The three key-frame-coordinate estimates of each bridged point (m, 3, 3).

    1. previous pair's key-frame point (units ``scale_prev``),
    2. current pair's key-frame point (units ``scale_cur``),
    3. current pair's current-frame point carried into the key frame.
    """
    s1 = scale_prev * triplets.point_from_prev_pair
    s2 = scale_cur * triplets.point_key_from_cur_pair
    s3 = key_from_cur.apply(scale_cur * triplets.point_from_cur_pair)
    return np.stack([s1, s2, s3], axis=1)


def _dedup_radius(points, scales, tree_pts, tree_scales, k=8):
    """0.5 x median mean-axis scale of the k nearest primitives around each point."""
    if not len(tree_pts):
        return 0.5 * scales
    kk = min(k, len(tree_pts))
    _, idx = cKDTree(tree_pts).query(points, k=kk)
    idx = np.asarray(idx).reshape(len(points), kk)
    return 0.5 * np.median(tree_scales[idx], axis=1)


def insert_gaussians(gmap, means, scales, op_logits, colors, dup_floor=0.0):
    """Append candidates that are not duplicates of existing or earlier candidates.

    Returns the number of primitives added (the revision bumps once if > 0).
    """
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    if not len(means):
        return 0
    scales = np.asarray(scales, dtype=float).reshape(-1)
    pool_pts = np.concatenate([gmap.means, means])
    pool_sc = np.concatenate([gmap.scales.mean(axis=1), scales])
    # neighbors exclude the candidate itself (k + 1 with self dropped)
    r = np.maximum(_dedup_radius(means, scales, pool_pts, pool_sc, k=9), dup_floor)
    accept = np.ones(len(means), dtype=bool)
    if len(gmap):
        hits = cKDTree(gmap.means).query_ball_point(means, r)
        accept &= np.array([len(h) == 0 for h in hits])
    near = cKDTree(means).query_ball_point(means, r)
    for i in range(len(means)):
        if not accept[i]:
            continue
        for j in near[i]:
            if j > i:
                accept[j] = False
    n = int(accept.sum())
    if n:
        q = np.tile([1.0, 0, 0, 0], (n, 1))
        gmap.append(means[accept], np.repeat(scales[accept, None], 3, axis=1), q,
                    np.asarray(colors, float)[accept], np.asarray(op_logits, float)[accept])
    return n


def insert_keyframe(gmap, triplets, images, poses, scales, cfg=None):
    """TUGI initialization from tri-view matches at keyframe insertion.

    ``images`` and ``poses`` (world-from-camera) are for I_{k-1}, I_k and the
    new keyframe; ``scales`` = (previous-pair, current-pair) scales to world
    units. Returns the number of primitives added.
    """
    cfg = cfg or TugiConfig()
    if triplets is None or len(triplets) == 0:
        return 0
    pose_prev, pose_key, pose_cur = poses
    key_from_cur = pose_key.inverse() @ pose_cur
    samples = triplet_samples(triplets, scales[0], scales[1], key_from_cur)
    mean_k, var, cnt = triview_uncertainty_batch(samples)
    ok = cnt >= 2
    if not ok.any():
        return 0
    means = pose_key.apply(mean_k[ok])
    sc, op = tugi_params(var[ok], cfg)
    cols = (sample_bilinear(images[0], triplets.p_prev[ok]) + sample_bilinear(images[1], triplets.p_key[ok])
            + sample_bilinear(images[2], triplets.p_cur[ok])) / 3.0
    return insert_gaussians(gmap, means, sc, op, np.clip(cols, 0, 1), cfg.dup_floor)


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------

def select_window(n_keyframes, rng, recent=5, older=3):
    """Indices of the last ``recent`` keyframes plus up to ``older`` random earlier ones."""
    last = list(range(max(0, n_keyframes - recent), n_keyframes))
    pool = np.arange(0, max(0, n_keyframes - recent))
    extra = sorted(rng.choice(pool, size=min(older, len(pool)), replace=False).tolist()) if len(pool) else []
    return extra + last


@dataclass
class RefineReport:
    losses: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def initial(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def final(self):
        return self.losses[-1] if self.losses else float("nan")


def refine_map(gmap, views, K, cfg=None, iterations=None):
    """Adam over all primitive parameters minimizing the mean image loss over ``views``.

    ``views`` is a list of (camera_from_world, image). Scales are optimized in
    log space, quaternions are renormalized and colors clipped to [0, 1] after
    every step. The final loss entry is evaluated after the last step.
    """
    cfg = cfg or RefineConfig()
    iterations = cfg.iterations if iterations is None else int(iterations)
    views = list(views)
    rep = RefineReport()
    if not views:
        raise ValueError("refine_map needs at least one keyframe")
    if len(gmap) == 0:
        return rep
    n = len(gmap)
    lr = np.concatenate([np.full(3 * n, cfg.lr_means), np.full(3 * n, cfg.lr_log_scales),
                         np.full(4 * n, cfg.lr_quats), np.full(3 * n, cfg.lr_colors), np.full(n, cfg.lr_opacity)])
    opt = Adam(lr, cfg.beta1, cfg.beta2, cfg.eps)
    means, log_s = gmap.means.copy(), np.log(gmap.scales)
    quats, colors, ops = gmap.quats.copy(), gmap.colors.copy(), gmap.opacity_logits.copy()
    work = gmap.copy()
    for _ in range(iterations):
        loss, g = map_gradients(work, views, K, cfg.gamma, cfg.background)
        rep.losses.append(loss)
        flat = np.concatenate([g.means.ravel(), (g.scales * work.scales).ravel(), g.quats.ravel(),
                               g.colors.ravel(), g.opacity_logits])
        if np.max(np.abs(flat)) <= cfg.grad_tol:
            rep.converged = True
            break
        step = opt.step(flat)
        o = 0
        for arr, size in ((means, 3 * n), (log_s, 3 * n), (quats, 4 * n), (colors, 3 * n), (ops, n)):
            arr -= step[o:o + size].reshape(arr.shape)
            o += size
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        np.clip(colors, 0.0, 1.0, out=colors)
        work.means, work.scales, work.quats = means, np.exp(log_s), quats
        work.colors, work.opacity_logits = colors, ops
        rep.iterations += 1
    if rep.iterations:
        rep.losses.append(map_loss(work, views, K, cfg.gamma, cfg.background))
    gmap.set_params(means=means, scales=np.exp(log_s), quats=quats, colors=colors, opacity_logits=ops)
    return rep


def opacity_of(op_logits):
    return sigmoid(op_logits)


class KeyframeRegistry:
    """Ordered keyframes with strictly increasing ids."""

    def __init__(self):
        self.keyframes = []

    def __len__(self):
        return len(self.keyframes)

    def __getitem__(self, i):
        return self.keyframes[i]

    def __iter__(self):
        return iter(self.keyframes)

    def add(self, kf):
        if self.keyframes and kf.id <= self.keyframes[-1].id:
            raise ValueError(f"keyframe id {kf.id} is not after {self.keyframes[-1].id}")
        if not (np.all(np.isfinite(kf.pose.R)) and np.all(np.isfinite(kf.pose.t))):
            raise ValueError("keyframe pose is not finite")
        self.keyframes.append(kf)
        return kf

    def views(self, indices):
        """(camera_from_world, image) pairs for refinement."""
        return [(self.keyframes[i].pose.inverse(), self.keyframes[i].image) for i in indices]

    def to_csv(self, path):
        from scipy.spatial.transform import Rotation

        from .splat.gaussians import atomic_write_text
        lines = ["id,timestamp,tx,ty,tz,qx,qy,qz,qw"]
        for kf in self.keyframes:
            q = Rotation.from_matrix(kf.pose.R).as_quat()
            vals = [*kf.pose.t, *q]
            lines.append(f"{kf.id},{kf.timestamp!r}," + ",".join(repr(float(v)) for v in vals))
        atomic_write_text(path, "\n".join(lines) + "\n")
