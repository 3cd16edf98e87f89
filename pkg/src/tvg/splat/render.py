"""Exact per-pixel Gaussian splatting on the CPU, with analytic gradients.

Pose gradients are taken with respect to a left perturbation of the
camera-from-world transform, ``exp(xi) * T_cw`` with ``xi = (omega, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import Pose, vee
from .gaussians import GaussianMap, covariance, quat_to_rot, rot_grad_to_quat_grad, sigmoid
from .image import image_loss_with_grad

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
T_MIN = 1e-4
ALPHA_EPS = 1e-10
ALPHA_MAX = 1.0 - 1e-12
COUNT_ALPHA = 1.0 / 255.0
DEFAULT_BACKGROUND = 0.5


@dataclass
class RenderedView:
    color: np.ndarray   # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    count: np.ndarray   # (H, W) primitives with non-negligible weight


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def _background(bg):
    return np.broadcast_to(np.asarray(bg, dtype=float), (3,)).copy()


def _project(gmap, camera_from_world, K):
    W, tcw = camera_from_world.R, camera_from_world.t
    t = gmap.means @ W.T + tcw
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    valid = tz > NEAR_PLANE
    tzs = np.where(valid, tz, 1.0)
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = K.fx / tzs
    J[:, 0, 2] = -K.fx * tx / tzs**2
    J[:, 1, 1] = K.fy / tzs
    J[:, 1, 2] = -K.fy * ty / tzs**2
    u = np.stack([K.fx * tx / tzs + K.cx, K.fy * ty / tzs + K.cy], axis=1)
    sigma = covariance(gmap.scales, gmap.quats)
    sigma_cam = W @ sigma @ W.T
    cov2d = J @ sigma_cam @ J.transpose(0, 2, 1) + COV2D_DILATION * np.eye(2)
    return t, valid, J, u, sigma, sigma_cam, cov2d


def project_gaussian(g, camera_from_world, K):
    """2D mean, dilated 2D covariance and depth of one primitive, or ``None`` if culled."""
    gm = GaussianMap.from_primitives([g])
    t, valid, _, u, _, _, cov2d = _project(gm, camera_from_world, K)
    if not valid[0]:
        return None
    return ProjectedGaussian(u[0], cov2d[0], float(t[0, 2]))


def pixel_grid(K):
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


class _Raster:
    """Forward pass state kept for the backward pass.

    The sparse backend only visits pixels inside each primitive's support box
    (where its weight can exceed ``ALPHA_EPS``) and blends per pixel with
    segmented prefix products; the dense backend evaluates every
    primitive/pixel pair and serves as a reference.
    """

    def __init__(self, gmap, camera_from_world, K, background, dense=False):
        self.K = K
        self.bg = _background(background)
        self.pose = camera_from_world
        self.dense = dense
        t, valid, J, u, sigma, sigma_cam, cov2d = _project(gmap, camera_from_world, K)
        idx = np.nonzero(valid)[0]
        # canonical depth order, ties broken by insertion id
        order = idx[np.lexsort((gmap.ids[idx], t[idx, 2]))]
        self.order = order
        self.t, self.J, self.u = t[order], J[order], u[order]
        self.sigma_cam = sigma_cam[order]
        self.cov2d = cov2d[order]
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        self.conic = np.stack([c / det, -b / det, a / det], axis=1)
        self.opacity = sigmoid(gmap.opacity_logits[order])
        self.colors = gmap.colors[order]
        self.n = len(order)
        self.P = K.width * K.height
        if dense:
            self._pairs_dense()
        else:
            self._pairs_sparse()
        self._blend()

    def _pairs_dense(self):
        n, P = self.n, self.P
        self.gi = np.repeat(np.arange(n), P)
        self.pix = np.tile(np.arange(P), n)
        # pixel-major ordering with primitives front to back inside each pixel
        perm = np.argsort(self.pix, kind="stable")
        self.gi, self.pix = self.gi[perm], self.pix[perm]

    def _pairs_sparse(self):
        K, n = self.K, self.n
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        cut = np.log(np.maximum(self.opacity, ALPHA_EPS) / ALPHA_EPS)
        r = np.sqrt(2.0 * cut * lam)
        ux, uy = self.u[:, 0], self.u[:, 1]
        x0 = np.clip(np.ceil(ux - r), 0, K.width).astype(np.int64)
        x1 = np.clip(np.floor(ux + r), -1, K.width - 1).astype(np.int64)
        y0 = np.clip(np.ceil(uy - r), 0, K.height).astype(np.int64)
        y1 = np.clip(np.floor(uy + r), -1, K.height - 1).astype(np.int64)
        bw = np.maximum(x1 - x0 + 1, 0)
        bh = np.maximum(y1 - y0 + 1, 0)
        counts = bw * bh
        total = int(counts.sum())
        gi = np.repeat(np.arange(n), counts)
        k = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        bwg = bw[gi]
        px = x0[gi] + k % np.maximum(bwg, 1)
        py = y0[gi] + k // np.maximum(bwg, 1)
        pix = py * K.width + px
        perm = np.argsort(pix, kind="stable")
        self.gi, self.pix = gi[perm], pix[perm]

    def _blend(self):
        K, P = self.K, self.P
        gi, pix = self.gi, self.pix
        px = (pix % K.width).astype(float)
        py = (pix // K.width).astype(float)
        self.dx = px - self.u[gi, 0]
        self.dy = py - self.u[gi, 1]
        A, B, C = self.conic[gi, 0], self.conic[gi, 1], self.conic[gi, 2]
        power = -0.5 * (A * self.dx**2 + 2 * B * self.dx * self.dy + C * self.dy**2)
        alpha = np.minimum(self.opacity[gi] * np.exp(np.minimum(power, 0.0)), ALPHA_MAX)
        alpha[alpha < ALPHA_EPS] = 0.0
        self.alpha = alpha

        counts = np.bincount(pix, minlength=P)
        self.seg_start = np.cumsum(counts) - counts
        self.seg_pos = np.arange(len(pix)) - self.seg_start[pix]
        L = np.log1p(-alpha)
        T = np.exp(self._seg_cumsum(L, exclusive=True)) if len(pix) else np.zeros(0)
        self.T = T
        self.incl = T >= T_MIN
        self.T_final = np.exp(np.bincount(pix, weights=L * self.incl, minlength=P))
        self.w = alpha * T * self.incl
        rgb = np.stack([np.bincount(pix, weights=self.w * self.colors[gi, ch], minlength=P)
                        for ch in range(3)], axis=1)
        self.rgb = rgb + self.T_final[:, None] * self.bg[None, :]

    def _seg_cumsum(self, values, exclusive=False):
        """Prefix sums restarted at every pixel.

        One global cumsum of non-positive (or arbitrary) increments; the
        exclusive form shifts within segments first so that, for non-positive
        inputs, the result is non-increasing inside each pixel even after
        rounding.
        """
        if not len(values):
            return np.zeros(0)
        if exclusive:
            shifted = np.empty_like(values)
            shifted[0] = 0.0
            shifted[1:] = values[:-1]
            shifted[self.seg_pos == 0] = 0.0
            values = shifted
        cs = np.cumsum(values)
        start = self.seg_start[self.pix]
        return cs - (cs[start] - values[start])

    def view(self):
        H, W = self.K.height, self.K.width
        count = np.bincount(self.pix, weights=(self.incl & (self.alpha >= COUNT_ALPHA)),
                            minlength=self.P).astype(np.int64)
        return RenderedView(self.rgb.reshape(H, W, 3), (1.0 - self.T_final).reshape(H, W),
                            count.reshape(H, W))

    def backward(self, grad_rgb):
        """Per-primitive gradients (sorted order) and the pose twist gradient."""
        g = np.asarray(grad_rgb, dtype=float).reshape(-1, 3)
        n = self.n
        if n == 0:
            return None, np.zeros(6)
        gi, pix, P = self.gi, self.pix, self.P
        gp = g[pix]
        cg = np.sum(self.colors[gi] * gp, axis=1)
        wcg = self.w * cg
        seg_total = np.bincount(pix, weights=wcg, minlength=P)
        incl_prefix = self._seg_cumsum(wcg)
        after = seg_total[pix] - incl_prefix + self.T_final[pix] * (g @ self.bg)[pix]
        g_alpha = self.incl * (self.T * cg - after / np.maximum(1.0 - self.alpha, 1e-12))

        bc = lambda wts: np.bincount(gi, weights=wts, minlength=n)  # noqa: E731
        g_color = np.stack([bc(self.w * gp[:, ch]) for ch in range(3)], axis=1)
        g_pow = g_alpha * self.alpha
        g_opac = bc(g_pow) / self.opacity

        A, B, C = self.conic[gi, 0], self.conic[gi, 1], self.conic[gi, 2]
        dx, dy = self.dx, self.dy
        g_u = np.stack([bc(g_pow * (A * dx + B * dy)), bc(g_pow * (B * dx + C * dy))], axis=1)
        gA = -0.5 * bc(g_pow * dx * dx)
        gB = -bc(g_pow * dx * dy)
        gC = -0.5 * bc(g_pow * dy * dy)
        G_conic = np.empty((n, 2, 2))
        G_conic[:, 0, 0], G_conic[:, 0, 1], G_conic[:, 1, 0], G_conic[:, 1, 1] = gA, 0.5 * gB, 0.5 * gB, gC
        Q = np.empty((n, 2, 2))
        Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (self.conic[:, 0], self.conic[:, 1],
                                                          self.conic[:, 1], self.conic[:, 2])
        G_cov2d = -Q @ G_conic @ Q

        J, Sc = self.J, self.sigma_cam
        G_sc = J.transpose(0, 2, 1) @ G_cov2d @ J
        G_J = 2.0 * G_cov2d @ J @ Sc

        K = self.K
        tx, ty, tz = self.t[:, 0], self.t[:, 1], self.t[:, 2]
        g_t = np.einsum("nij,ni->nj", J, g_u)
        g_t[:, 0] += G_J[:, 0, 2] * (-K.fx / tz**2)
        g_t[:, 1] += G_J[:, 1, 2] * (-K.fy / tz**2)
        g_t[:, 2] += (G_J[:, 0, 0] * (-K.fx / tz**2) + G_J[:, 0, 2] * (2 * K.fx * tx / tz**3)
                      + G_J[:, 1, 1] * (-K.fy / tz**2) + G_J[:, 1, 2] * (2 * K.fy * ty / tz**3))

        Wr = self.pose.R
        # d Sigma_cam = [w]x Sigma_cam - Sigma_cam [w]x
        commut = Sc @ G_sc - G_sc @ Sc
        g_omega = np.sum(np.cross(self.t, g_t), axis=0) - 2.0 * np.array(
            [commut[:, 2, 1].sum(), commut[:, 0, 2].sum(), commut[:, 1, 0].sum()])
        g_pose = np.concatenate([g_omega, g_t.sum(axis=0)])

        grads = {
            "means": g_t @ Wr,
            "sigma": Wr.T @ G_sc @ Wr,
            "colors": g_color,
            "opacity": g_opac,
        }
        return grads, g_pose


def render(gmap, camera_from_world, K, background=DEFAULT_BACKGROUND, dense=False):
    """Front-to-back alpha blending of all primitives at every pixel."""
    return _Raster(gmap, camera_from_world, K, background, dense).view()


@dataclass
class MapGradients:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n))

    def max_abs(self):
        return max(float(np.max(np.abs(getattr(self, f)), initial=0.0))
                   for f in ("means", "scales", "quats", "colors", "opacity_logits"))


def _accumulate_map_grads(gmap, raster, grads, out, weight):
    if grads is None:
        return
    o = raster.order
    G_sigma = grads["sigma"]
    R = quat_to_rot(gmap.quats[o])
    s = gmap.scales[o]
    # Sigma = sum_k s_k^2 r_k r_k^T with r_k the k-th row of R
    g_scale = 2 * s * np.einsum("nki,nij,nkj->nk", R, G_sigma, R)
    g_R = 2 * (s**2)[:, :, None] * (R @ G_sigma)
    g_q = rot_grad_to_quat_grad(gmap.quats[o], g_R)
    a = sigmoid(gmap.opacity_logits[o])
    out.means[o] += weight * grads["means"]
    out.scales[o] += weight * g_scale
    out.quats[o] += weight * g_q
    out.colors[o] += weight * grads["colors"]
    out.opacity_logits[o] += weight * grads["opacity"] * a * (1 - a)


def loss_and_gradients(gmap, camera_from_world, K, target, gamma, background=DEFAULT_BACKGROUND,
                       want_map=True, want_pose=True):
    """Image loss of one view with map and/or pose gradients."""
    raster = _Raster(gmap, camera_from_world, K, background)
    rendered = raster.rgb.reshape(K.height, K.width, 3)
    loss, g_img = image_loss_with_grad(target, rendered, gamma)
    grads, g_pose = raster.backward(g_img)
    mg = None
    if want_map:
        mg = MapGradients.zeros(len(gmap))
        _accumulate_map_grads(gmap, raster, grads, mg, 1.0)
    return loss, mg, (g_pose if want_pose else None), rendered


def pose_gradient(gmap, camera_from_world, K, target, gamma, background=DEFAULT_BACKGROUND):
    """Gradient of the image loss with respect to the left-perturbation twist."""
    _, _, g_pose, _ = loss_and_gradients(gmap, camera_from_world, K, target, gamma, background,
                                         want_map=False)
    return g_pose


def map_gradients(gmap, keyframes, K, gamma, background=DEFAULT_BACKGROUND):
    """Mean image loss over ``keyframes`` [(camera_from_world, image), ...] and its
    per-primitive gradients."""
    keyframes = list(keyframes)
    out = MapGradients.zeros(len(gmap))
    total = 0.0
    wt = 1.0 / max(len(keyframes), 1)
    for pose, image in keyframes:
        raster = _Raster(gmap, pose, K, background)
        loss, g_img = image_loss_with_grad(image, raster.rgb.reshape(K.height, K.width, 3), gamma)
        grads, _ = raster.backward(g_img)
        _accumulate_map_grads(gmap, raster, grads, out, wt)
        total += wt * loss
    return total, out


def map_loss(gmap, keyframes, K, gamma, background=DEFAULT_BACKGROUND):
    from .image import image_loss
    keyframes = list(keyframes)
    return sum(image_loss(img, render(gmap, pose, K, background).color, gamma)
               for pose, img in keyframes) / max(len(keyframes), 1)
