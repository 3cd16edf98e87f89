"""Multi-view geometry: rigid and similarity transforms, pinhole projection,
trifocal tensor construction and transfer, robust kernels and Procrustes.

Twists are ordered ``(omega, v)``: rotation block first, translation second.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    AlignmentDegenerateError,
    DegenerateConfigurationError,
    DegenerateTransferError,
)

MIN_BASELINE = 1e-6


def hat(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def skew_batch(w):
    """(n, 3) -> (n, 3, 3) cross-product matrices."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _so3_coeffs(theta):
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3 with series near 0
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    A, B, _ = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    axis_sin = 0.5 * vee(R - R.T)          # sin(theta) * axis
    s = float(np.linalg.norm(axis_sin))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < 1e-6:
        return axis_sin * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-3:
        return axis_sin * (theta / s)
    # near pi: recover the axis from the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)   # (1 - c) * axis axis^T
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(B[i, i])
    axis /= np.linalg.norm(axis)
    if np.dot(axis, axis_sin) < 0:
        axis = -axis
    return axis * theta


def so3_left_jacobian(w):
    theta = float(np.linalg.norm(w))
    _, B, C = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + B * W + C * (W @ W)


def so3_left_jacobian_inv(w):
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-4:
        d = 1.0 / 12.0 + theta**2 / 720.0
    else:
        d = (1.0 - 0.5 * theta * np.sin(theta) / (1.0 - np.cos(theta))) / theta**2
    return np.eye(3) - 0.5 * W + d * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``. World-from-camera unless stated."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.R @ other.R, self.R @ other.t + self.t)
        return NotImplemented

    def apply(self, points):
        """Transform a 3-vector or an (n, 3) array."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    @property
    def center(self):
        """Origin of the source frame expressed in the target frame."""
        return self.t.copy()

    def is_valid(self, tol=1e-9):
        return (np.max(np.abs(self.R.T @ self.R - np.eye(3))) < tol
                and np.linalg.det(self.R) > 0)

    def retract(self, twist):
        """Left perturbation ``exp(twist) * self``."""
        return se3_exp(twist) @ self


def se3_exp(twist):
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def se3_log(pose):
    w = so3_log(pose.R)
    v = so3_left_jacobian_inv(w) @ pose.t
    return np.concatenate([w, v])


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians."""
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> s R x + t``."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.R.T) + self.t

    def inverse(self):
        Rt = self.R.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.t) / self.scale)

    def apply_to_pose(self, pose):
        """Map a world-from-camera pose through the similarity (scales position only)."""
        return Pose(self.R @ pose.R, self.scale * (self.R @ pose.t) + self.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def centered(cls, width, height, focal):
        return cls(float(focal), float(focal), (width - 1) / 2.0, (height - 1) / 2.0,
                   int(width), int(height))

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def normalize(self, pixels):
        """Pixels (n, 2) -> homogeneous normalized coordinates (n, 3)."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        x = (pixels[:, 0] - self.cx) / self.fx
        y = (pixels[:, 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=1)

    def in_bounds(self, pixels, margin=0.0):
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= -0.5 + margin) & (pixels[:, 0] <= self.width - 0.5 - margin)
                & (pixels[:, 1] >= -0.5 + margin) & (pixels[:, 1] <= self.height - 0.5 - margin))


class Projection(NamedTuple):
    pixel: np.ndarray
    depth: float


def project(K, camera_from_world, P) -> Optional[Projection]:
    """Pinhole projection. Returns ``None`` for points at or behind the camera."""
    X, Y, Z = camera_from_world.apply(np.asarray(P, dtype=float))
    if not Z > 0:
        return None
    return Projection(np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy]), float(Z))


def project_points(K, camera_from_world, points):
    """Vectorized projection: returns pixels (n, 2), depths (n,), visibility mask."""
    pc = camera_from_world.apply(np.atleast_2d(points))
    z = pc[:, 2]
    visible = z > 0
    zs = np.where(visible, z, 1.0)
    pix = np.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1)
    return pix, z, visible


# --------------------------------------------------------------------------
# trifocal tensor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrifocalTensor:
    """Three 3x3 slices in normalized coordinates; view 1 is canonical."""

    slices: np.ndarray

    def __post_init__(self):
        s = np.array(self.slices, dtype=float).reshape(3, 3, 3)
        s.setflags(write=False)
        object.__setattr__(self, "slices", s)

    def scaled(self, lam):
        return TrifocalTensor(lam * self.slices)

    def contract(self, p1):
        """M = sum_i p1[i] * T_i."""
        return np.tensordot(np.asarray(p1, dtype=float), self.slices, axes=(0, 0))


def trifocal_from_poses(pose_2, pose_3):
    """Tensor for cameras [I|0], [A|a4], [B|b4].

    ``pose_2`` and ``pose_3`` map view-1 coordinates into views 2 and 3.
    """
    A, a4 = pose_2.R, pose_2.t
    B, b4 = pose_3.R, pose_3.t
    if np.linalg.norm(a4) <= MIN_BASELINE and np.linalg.norm(b4) <= MIN_BASELINE:
        raise DegenerateConfigurationError("both baselines are zero")
    return TrifocalTensor(trifocal_slices(A, a4, B, b4))


def trifocal_slices(A, a4, B, b4):
    # T_i = a_i b4^T - a4 b_i^T, with a_i / b_i the i-th columns
    return (np.einsum("ji,k->ijk", A, b4) - np.einsum("j,ki->ijk", a4, B))


def epipolar_transfer(T, p1, p2):
    """Literal line transfer ``sum_i p1^i T_i p2``."""
    return T.contract(p1) @ np.asarray(p2, dtype=float)


def trifocal_residual(p_t, l_t):
    """Sum of squared algebraic residuals, i.e. ``|p_t x l_t|^2``."""
    return float(np.sum(np.cross(np.asarray(p_t, float), np.asarray(l_t, float)) ** 2))


def incidence_residual(p_t, l_t):
    """Point-on-line residual ``(p_t . l_t)^2``."""
    return float(np.dot(p_t, l_t) ** 2)


def point_transfer_checked(T, p1, p2, tol=1e-12):
    """Point-line-point transfer into view 3.

    The line through ``p2`` perpendicular to the epipolar line of ``p1`` is
    pushed through the contracted tensor, which avoids the degenerate case of
    using the epipolar line itself.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    M = T.contract(p1)
    # columns of M span the epipolar line of p1 in view 2
    U, _, _ = np.linalg.svd(M)
    le = U[:, 2]
    x2, y2 = p2[0] / p2[2], p2[1] / p2[2]
    l2 = np.array([le[1], -le[0], -x2 * le[1] + y2 * le[0]])
    if np.linalg.norm(l2[:2]) < tol:
        raise DegenerateTransferError("epipolar line undefined at query point")
    out = M.T @ l2
    if np.linalg.norm(out) < tol:
        raise DegenerateTransferError("transferred point vanishes (query near epipole)")
    return out


# --------------------------------------------------------------------------
# robust kernel
# --------------------------------------------------------------------------

def huber(r_sq, delta):
    """Huber kernel on a squared residual."""
    r_sq = np.asarray(r_sq, dtype=float)
    r = np.sqrt(r_sq)
    out = np.where(r <= delta, 0.5 * r_sq, delta * (r - 0.5 * delta))
    return out if out.ndim else float(out)


def huber_weight(r_sq, delta):
    """Derivative of :func:`huber` with respect to ``r_sq``."""
    r_sq = np.asarray(r_sq, dtype=float)
    r = np.sqrt(r_sq)
    return np.where(r <= delta, 0.5, 0.5 * delta / np.maximum(r, 1e-300))


def squared(r_sq, delta=None):
    return 0.5 * np.asarray(r_sq, dtype=float)


def squared_weight(r_sq, delta=None):
    return np.full(np.shape(r_sq), 0.5)


# --------------------------------------------------------------------------
# Procrustes / Umeyama
# --------------------------------------------------------------------------

def procrustes_align(src, dst, with_scale=True, weights=None):
    """Least-squares ``argmin sum |s R src_i + t - dst_i|^2`` (Umeyama)."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    n = len(src)
    if n < 3:
        raise AlignmentDegenerateError(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    if D[0] <= 0 or D[1] <= 1e-12 * D[0]:
        raise AlignmentDegenerateError("cross-covariance is rank deficient (collinear points)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(w @ np.sum(xs * xs, axis=1))
        scale = float(np.sum(D * np.diag(S)) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, R, t)


def trimmed_procrustes(src, dst, with_scale=True, rounds=3, cutoff=3.0, keep_fraction=0.5, c_steps=20):
    """Outlier-resistant Procrustes.

    Least-trimmed-squares concentration steps (refit on the ``keep_fraction``
    best residuals until the subset is stable) give a start that gross
    outliers cannot drag, then up to ``rounds`` refits on every point within
    ``cutoff`` x the median residual of that subset recover efficiency.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    sim = procrustes_align(src, dst, with_scale)
    h = max(3, int(np.ceil(keep_fraction * n)))
    keep = np.ones(n, dtype=bool)
    if h < n:
        for _ in range(c_steps):
            res = np.linalg.norm(sim.apply(src) - dst, axis=1)
            new_keep = np.zeros(n, dtype=bool)
            new_keep[np.argsort(res, kind="stable")[:h]] = True
            if np.array_equal(new_keep, keep):
                break
            keep = new_keep
            sim = procrustes_align(src[keep], dst[keep], with_scale)
    for _ in range(rounds):
        res = np.linalg.norm(sim.apply(src) - dst, axis=1)
        med = np.median(res[keep])
        new_keep = res <= max(cutoff * med, 1e-12)
        if new_keep.sum() < 3 or np.array_equal(new_keep, keep):
            break
        keep = new_keep
        sim = procrustes_align(src[keep], dst[keep], with_scale)
    return sim, keep
