"""Per-frame pose tracking with photometric, trifocal and 3D alignment terms.

All pose gradients are taken with respect to a left perturbation of the
current camera-from-world pose, ``T_cw <- exp(xi) T_cw`` with ``xi = (w, v)``.
``TrackerState.pose`` stores the world-from-camera estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (AlignmentDegenerateError, ConfigError, InsufficientEvidenceError, TrackingFailure)
from .geom import (Pose, huber, huber_weight, procrustes_align, se3_exp, squared, squared_weight,
                   trimmed_procrustes)
from .optim import Adam
from .splat import DEFAULT_BACKGROUND, loss_and_gradients

TRANSFER_MODES = ("checked", "literal")
RESIDUAL_STYLES = ("cross", "incidence")


@dataclass
class TrackerConfig:
    lambda_2d: float = 0.01
    lambda_3d: float = 0.01
    gamma: float = 0.2
    iterations: int = 40
    lr_rotation: float = 0.001
    lr_translation: float = 0.002
    w_min: float = 0.1
    w_max: float = 1.0
    n_m: float = 5.0
    k: float = 0.8
    huber_delta_2d: float = 1e-2
    huber_delta_3d: float = 0.1
    transfer_mode: str = "checked"
    residual_style: str = "cross"
    robust: bool = True
    use_photo: bool = True
    use_2d: bool = True
    use_3d: bool = True
    use_dart: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_tol: float = 1e-8
    early_stop_patience: int = 5
    grad_tol: float = 1e-12
    background: float = DEFAULT_BACKGROUND

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_2d", "lambda_3d", "w_min", "w_max", "lr_rotation", "lr_translation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.w_min > self.w_max:
            raise ConfigError("w_min must not exceed w_max")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.transfer_mode not in TRANSFER_MODES:
            raise ConfigError(f"transfer_mode must be one of {TRANSFER_MODES}")
        if self.residual_style not in RESIDUAL_STYLES:
            raise ConfigError(f"residual_style must be one of {RESIDUAL_STYLES}")
        if self.transfer_mode == "checked" and self.residual_style == "incidence":
            raise ConfigError("incidence residuals need a line; use transfer_mode='literal'")
        if self.huber_delta_2d <= 0 or self.huber_delta_3d <= 0:
            raise ConfigError("Huber deltas must be positive")

    def kernel(self):
        return (huber, huber_weight) if self.robust else (squared, squared_weight)


@dataclass
class TrackerState:
    pose: Pose  # world-from-camera of the frame being tracked
    frames_since_keyframe: int = 0
    accumulated_scale: float = 1.0
    prev_keyframe: Optional[int] = None
    keyframe: Optional[int] = None
    history: list = field(default_factory=list)  # world-from-camera of tracked frames

    def __post_init__(self):
        if self.frames_since_keyframe < 0:
            raise ValueError("frames_since_keyframe must be non-negative")
        if not self.accumulated_scale > 0:
            raise ValueError("accumulated_scale must be positive")

    def reset_keyframe_counter(self):
        self.frames_since_keyframe = 0


@dataclass
class TrackReport:
    L_photo: np.ndarray
    L_2d: np.ndarray
    L_3d: np.ndarray
    lambda_p: np.ndarray
    total: np.ndarray
    pose: Pose
    inliers_2d: int
    outliers_2d: int
    inliers_3d: int
    outliers_3d: int
    converged: bool
    iterations: int
    map_revision: int
    pair_scale: float
    flags: tuple = ()

    def rows(self, frame):
        """Run-log rows ``frame,iter,L_photo,L_2D,L_3D,lambda_p,total``."""
        return [(frame, i, self.L_photo[i], self.L_2d[i], self.L_3d[i], self.lambda_p[i], self.total[i])
                for i in range(self.iterations)]


@dataclass
class GeomLoss:
    value: float
    grad: np.ndarray
    n_valid: int
    inliers: int
    outliers: int
    empty: bool


def dart_weight(frames_since_keyframe, cfg=None):
    """DART trust weight ``w_min + (w_max - w_min) / (1 + exp(k (dN - N_m)))``."""
    cfg = cfg or TrackerConfig()
    dn = float(frames_since_keyframe)
    if dn < 0:
        raise ValueError("frames_since_keyframe must be non-negative")
    x = cfg.k * (dn - cfg.n_m)
    # 1 / (1 + e^x) written to avoid overflow for large x
    sig = math.exp(-x) / (1.0 + math.exp(-x)) if x > 0 else 1.0 / (1.0 + math.exp(x))
    return cfg.w_min + (cfg.w_max - cfg.w_min) * sig


def _empty_loss():
    return GeomLoss(0.0, np.zeros(6), 0, 0, 0, True)


def _relative_pose(target_cw, source_cw):
    """Pose taking ``source`` camera coordinates into ``target`` camera coordinates."""
    return target_cw @ source_cw.inverse()


def loss_2d(triplets, pose_prev, pose_key, pose_cur, K, cfg=None):
    """Robust trifocal loss over tri-view matches and its twist gradient.

    Poses are world-from-camera. View 1 is I_{k-1} (canonical), view 2 the
    bridge keyframe and view 3 the current frame. In ``checked`` mode the
    transferred point is dehomogenized before the cross-product residual; in
    ``literal`` mode the transferred line is scaled to unit norm.
    """
    cfg = cfg or TrackerConfig()
    if len(triplets) == 0:
        return _empty_loss()
    rho, rho_w = cfg.kernel()
    delta = cfg.huber_delta_2d
    p1 = K.normalize(triplets.p_prev)
    p2 = K.normalize(triplets.p_key)
    p3 = K.normalize(triplets.p_cur)
    cw_prev, cw_key, cw_cur = pose_prev.inverse(), pose_key.inverse(), pose_cur.inverse()
    rel2 = _relative_pose(cw_key, cw_prev)
    rel3 = _relative_pose(cw_cur, cw_prev)
    A, a4, B, b4 = rel2.R, rel2.t, rel3.R, rel3.t
    Ax = p1 @ A.T
    Bx = p1 @ B.T
    n = len(p1)
    if cfg.transfer_mode == "checked":
        le = np.cross(Ax, a4)
        l2 = np.stack([le[:, 1], -le[:, 0], -p2[:, 0] * le[:, 1] + p2[:, 1] * le[:, 0]], axis=1)
        c_a = np.sum(l2 * Ax, axis=1)
        c_b = l2 @ a4
        ph = c_a[:, None] * b4[None, :] - c_b[:, None] * Bx
        scale = np.linalg.norm(Ax, axis=1) * max(np.linalg.norm(a4), 1e-300)
        valid = ((np.linalg.norm(le[:, :2], axis=1) > 1e-12 * scale)
                 & (np.abs(ph[:, 2]) > 1e-12 * np.linalg.norm(ph, axis=1)))
        ph = ph[valid]
        c_a = c_a[valid]
        p = p3[valid]
        q = ph / ph[:, 2:3]
        c = np.cross(p, q)
        r_sq = np.sum(c * c, axis=1)
        dr_dq = 2 * np.cross(c, p)
        # dq/dph = (I - q e3^T) / ph_z
        g_ph = dr_dq / ph[:, 2:3]
        g_ph[:, 2] -= np.sum(dr_dq * q, axis=1) / ph[:, 2]
        # d ph = w x ph + c_a v
        g_w = np.cross(ph, g_ph)
        g_v = c_a[:, None] * g_ph
    else:
        bp = b4 @ p2.T
        l = Ax * bp[:, None] - a4[None, :] * np.sum(Bx * p2, axis=1)[:, None]
        nl = np.linalg.norm(l, axis=1)
        valid = nl > 1e-12 * np.linalg.norm(Ax, axis=1) * np.linalg.norm(p2, axis=1) * max(
            np.linalg.norm(a4) + np.linalg.norm(b4), 1e-300)
        l, nl, p = l[valid], nl[valid], p3[valid]
        Axv, Bxv, p2v = Ax[valid], Bx[valid], p2[valid]
        u = l / nl[:, None]
        if cfg.residual_style == "cross":
            c = np.cross(p, u)
            r_sq = np.sum(c * c, axis=1)
            dr_du = 2 * np.cross(c, p)
        else:
            d = np.sum(p * u, axis=1)
            r_sq = d * d
            dr_du = 2 * d[:, None] * p
        g_l = (dr_du - u * np.sum(dr_du * u, axis=1, keepdims=True)) / nl[:, None]
        # dl/dw = Ax (b4 x p2)^T - a4 (Bx x p2)^T ; dl/dv = Ax p2^T
        gA = np.sum(g_l * Axv, axis=1)
        ga = g_l @ a4
        g_w = gA[:, None] * np.cross(b4[None, :], p2v) - ga[:, None] * np.cross(Bxv, p2v)
        g_v = gA[:, None] * p2v
    nv = int(valid.sum())
    if nv == 0:
        return GeomLoss(0.0, np.zeros(6), 0, 0, n, True)
    w = rho_w(r_sq, delta)
    grad = np.concatenate([(w[:, None] * g_w).sum(axis=0), (w[:, None] * g_v).sum(axis=0)])
    inl = int(np.sum(r_sq <= delta * delta))
    return GeomLoss(float(np.sum(rho(r_sq, delta))), grad, nv, inl, n - inl, False)


def estimate_pair_scale(triplets, trimmed=True):
    """Scale taking current-pair points into previous-pair units."""
    if len(triplets) < 3:
        raise InsufficientEvidenceError(f"need at least 3 triplets for a scale estimate, got {len(triplets)}")
    src, dst = triplets.point_from_cur_pair, triplets.point_from_prev_pair
    if trimmed:
        sim, _ = trimmed_procrustes(src, dst, with_scale=True)
    else:
        sim = procrustes_align(src, dst, with_scale=True)
    return sim.scale


def loss_3d(triplets, s, cur_to_prev, cfg=None, prev_scale=1.0):
    """Robust 3D alignment loss ``sum rho(|T (s P_c) - prev_scale P_p|^2)``.

    ``cur_to_prev`` maps current-frame coordinates into the bridge keyframe.
    The gradient is with respect to ``xi`` where the current camera-from-world
    pose moves to ``exp(xi) T_cw``, i.e. ``cur_to_prev <- cur_to_prev exp(-xi)``.
    """
    cfg = cfg or TrackerConfig()
    if not s > 0:
        raise ValueError("scale must be positive")
    if len(triplets) == 0:
        return _empty_loss()
    rho, rho_w = cfg.kernel()
    delta = cfg.huber_delta_3d
    Y = s * triplets.point_from_cur_pair
    e = cur_to_prev.apply(Y) - prev_scale * triplets.point_from_prev_pair
    r_sq = np.sum(e * e, axis=1)
    w = rho_w(r_sq, delta)
    re = (2 * w[:, None] * e) @ cur_to_prev.R
    grad = np.concatenate([np.cross(re, Y).sum(axis=0), -re.sum(axis=0)])
    inl = int(np.sum(r_sq <= delta * delta))
    return GeomLoss(float(np.sum(rho(r_sq, delta))), grad, len(Y), inl, len(Y) - inl, False)


def constant_velocity(history):
    """Extrapolate the next world-from-camera pose from the last two."""
    if len(history) < 2:
        if history:
            return history[-1]
        raise InsufficientEvidenceError("no pose history to extrapolate from")
    a, b = history[-2], history[-1]
    return b @ (a.inverse() @ b)


def initialize_pose(m_key_cur, pose_key, accumulated_scale=1.0, history=None, trimmed=True):
    """World-from-current pose from the matches to the bridge keyframe.

    Rigidly aligns the current-frame pointmap (rescaled to world units) onto
    the keyframe pointmap expressed in world coordinates. Falls back to
    constant-velocity extrapolation over ``history`` when the alignment is
    degenerate; without history the degeneracy is raised. ``trimmed=False``
    uses a plain least-squares fit.
    """
    try:
        if len(m_key_cur) < 3:
            raise AlignmentDegenerateError(f"need at least 3 correspondences, got {len(m_key_cur)}")
        src = m_key_cur.point_in_b * accumulated_scale
        dst = pose_key.apply(m_key_cur.point_in_a * accumulated_scale)
        if trimmed:
            sim, _ = trimmed_procrustes(src, dst, with_scale=False)
        else:
            sim = procrustes_align(src, dst, with_scale=False)
        return Pose(sim.R, sim.t)
    except AlignmentDegenerateError:
        if not history:
            raise
        return constant_velocity(history)


def _photometric(image, gmap, cam_from_world, K, cfg):
    if gmap is None or len(gmap) == 0 or image is None:
        return None
    loss, _, g_pose, _ = loss_and_gradients(gmap, cam_from_world, K, image, cfg.gamma, cfg.background,
                                            want_map=False)
    return loss, g_pose


def track_frame(image, triplets, gmap, state, cfg, K, pose_prev=None, pose_key=None, pair_scale=None,
                iterations=None, triplets_3d=None):
    """Refine ``state.pose`` for one frame and return the per-iteration report.

    ``triplets`` bridge I_{k-1}, I_k (poses ``pose_prev``, ``pose_key``,
    world-from-camera) and the current frame. Previous-pair points are in
    units of ``state.accumulated_scale``; the current pair's relative scale is
    estimated from the triplets unless ``pair_scale`` is given. ``gmap`` is
    treated as read-only. ``triplets_3d`` optionally supplies a different set
    (e.g. without the parallax filter) for the scale estimate and the 3D term.
    """
    iterations = cfg.iterations if iterations is None else int(iterations)
    t3 = triplets if triplets_3d is None else triplets_3d
    have_poses = pose_prev is not None and pose_key is not None
    use_2d = cfg.use_2d and cfg.lambda_2d > 0 and have_poses and triplets is not None and len(triplets) > 0
    use_3d = cfg.use_3d and cfg.lambda_3d > 0 and have_poses and t3 is not None and len(t3) > 0
    use_photo = cfg.use_photo and gmap is not None and len(gmap) > 0 and image is not None
    flags = []
    if cfg.use_2d and cfg.lambda_2d > 0 and not use_2d:
        flags.append("no-constraint-2d")
    s_world = None
    if use_3d:
        try:
            s_pair = estimate_pair_scale(t3) if pair_scale is None else pair_scale
            s_world = state.accumulated_scale * s_pair
        except (InsufficientEvidenceError, AlignmentDegenerateError):
            flags.append("scale-degenerate")
            use_3d = False
    if not (use_photo or use_2d or use_3d):
        raise TrackingFailure("no photometric, trifocal or 3D constraint available for this frame")
    lam_p = dart_weight(state.frames_since_keyframe, cfg) if cfg.use_dart else cfg.w_max
    revision = getattr(gmap, "revision", -1) if gmap is not None else -1
    cw_key = pose_key.inverse() if pose_key is not None else None

    lr = np.array([cfg.lr_rotation] * 3 + [cfg.lr_translation] * 3)
    opt = Adam(lr, cfg.beta1, cfg.beta2, cfg.eps)
    cam = state.pose.inverse()
    rec = {k: [] for k in ("photo", "l2", "l3", "lam", "total")}
    last = (0, 0, 0, 0)
    still, converged = 0, False
    prev_total = None
    best_total, best_cam = np.inf, cam
    for _ in range(iterations):
        grad = np.zeros(6)
        lp = l2 = l3 = 0.0
        if use_photo:
            lp, gp = _photometric(image, gmap, cam, K, cfg)
            grad += lam_p * gp
        if use_2d:
            g2 = loss_2d(triplets, pose_prev, pose_key, cam.inverse(), K, cfg)
            if g2.empty:
                flags.append("no-constraint-2d")
            l2 = g2.value
            grad += cfg.lambda_2d * g2.grad
            last = (g2.inliers, g2.outliers) + last[2:]
        if use_3d:
            g3 = loss_3d(t3, s_world, cw_key @ cam.inverse(), cfg, prev_scale=state.accumulated_scale)
            l3 = g3.value
            grad += cfg.lambda_3d * g3.grad
            last = last[:2] + (g3.inliers, g3.outliers)
        total = lam_p * lp + cfg.lambda_2d * l2 + cfg.lambda_3d * l3
        for key, val in zip(("photo", "l2", "l3", "lam", "total"), (lp, l2, l3, lam_p, total)):
            rec[key].append(val)
        if total < best_total:
            best_total, best_cam = total, cam
        if prev_total is not None and abs(total - prev_total) <= cfg.early_stop_tol * max(abs(prev_total), 1e-300):
            still += 1
        else:
            still = 0
        prev_total = total
        # a numerically zero gradient is a stationary point; Adam would otherwise
        # rescale rounding noise into steps of roughly the learning rate
        if still >= cfg.early_stop_patience or np.max(np.abs(grad)) <= cfg.grad_tol:
            converged = True
            break
        cam = se3_exp(-opt.step(grad)) @ cam
    # Adam is not a descent method; keep the best evaluated iterate rather than the last
    pose = best_cam.inverse()
    state.pose = pose
    state.history.append(pose)
    state.frames_since_keyframe += 1
    arr = {k: np.array(v) for k, v in rec.items()}
    return TrackReport(arr["photo"], arr["l2"], arr["l3"], arr["lam"], arr["total"], pose,
                       last[0], last[1], last[2], last[3], converged, len(arr["total"]), revision,
                       float(s_world / state.accumulated_scale) if s_world is not None else float("nan"),
                       tuple(dict.fromkeys(flags)))
