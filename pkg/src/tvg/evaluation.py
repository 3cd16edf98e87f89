"""Trajectory and rendering metrics: aligned ATE, RPE, PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, SimilarityTransform, rotation_angle
from .splat import psnr, ssim
from .splat.gaussians import atomic_write_text

__all__ = ["EvalReport", "umeyama", "ate_rmse", "rpe", "psnr", "ssim", "evaluate"]


def _positions(traj):
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, float).reshape(-1, 3)
    return np.array([p.t for p in traj], dtype=float).reshape(-1, 3)


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity mapping ``src`` onto ``dst``.

    Unlike ``geom.procrustes_align`` this accepts rank-deficient (e.g. collinear)
    trajectories; the rotation about a degenerate axis is then arbitrary but
    the residual is still minimal. Coincident sources keep unit scale.
    """
    X, Y = np.asarray(src, float), np.asarray(dst, float)
    if X.shape != Y.shape or len(X) < 1:
        raise ValueError("umeyama needs matching non-empty point sets")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    U, D, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.mean(np.sum(Xc * Xc, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var) if with_scale and var > 0 else 1.0
    if s <= 0:
        s = 1.0
    return SimilarityTransform(s, R, my - s * R @ mx)


def ate_rmse(estimated, ground_truth, align="sim3"):
    """RMSE of position residuals after optional alignment; returns (rmse, aligned poses or positions)."""
    E, G = _positions(estimated), _positions(ground_truth)
    if len(E) != len(G):
        raise ValueError(f"trajectory lengths differ: {len(E)} vs {len(G)}")
    if len(E) < 2:
        raise ValueError("ATE needs at least two poses")
    if align == "none":
        sim = SimilarityTransform(1.0, np.eye(3), np.zeros(3))
    elif align in ("se3", "sim3"):
        sim = umeyama(E, G, with_scale=(align == "sim3"))
    else:
        raise ValueError(f"unknown alignment {align!r}")
    if isinstance(estimated, np.ndarray):
        aligned = sim.apply(E)
        pos = aligned
    else:
        aligned = [sim.apply_to_pose(p) for p in estimated]
        pos = _positions(aligned)
    err = np.linalg.norm(pos - G, axis=1)
    return float(np.sqrt(np.mean(err ** 2))), aligned


def rpe(estimated, ground_truth, delta=1):
    """RMSE relative pose error over frame gaps of ``delta``: (units/frame, degrees/frame)."""
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    tr, rot = rpe_series(estimated, ground_truth, delta)
    if not len(tr):
        return 0.0, 0.0
    return float(np.sqrt(np.mean(tr ** 2))), float(np.sqrt(np.mean(rot ** 2)))


def rpe_series(estimated, ground_truth, delta=1):
    delta = int(delta)
    if delta < 1:
        raise ValueError("delta must be >= 1")
    tr, rot = [], []
    for i in range(len(estimated) - delta):
        rel_e = estimated[i].inverse() @ estimated[i + delta]
        rel_g = ground_truth[i].inverse() @ ground_truth[i + delta]
        err = rel_g.inverse() @ rel_e
        tr.append(np.linalg.norm(err.t) / delta)
        rot.append(np.degrees(rotation_angle(err.R)) / delta)
    return np.array(tr), np.array(rot)


@dataclass
class EvalReport:
    ate_rmse: float
    rpe_trans: float
    rpe_rot: float
    psnr_mean: float
    ssim_mean: float
    ate_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rpe_trans_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rpe_rot_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psnr_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ssim_series: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_csv(self, path):
        lines = ["frame,ate,rpe_trans,rpe_rot,psnr,ssim"]
        for i in range(len(self.ate_series)):
            vals = (self.ate_series[i], self.rpe_trans_series[i], self.rpe_rot_series[i],
                    self.psnr_series[i] if len(self.psnr_series) else float("nan"),
                    self.ssim_series[i] if len(self.ssim_series) else float("nan"))
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in vals))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def summary(self, method="ours"):
        """Plain-text table with the ATE / PSNR / SSIM / LPIPS column layout."""
        def fmt(v, d):
            return "n/a" if v is None or not np.isfinite(v) else f"{v:.{d}f}"
        head = f"{'Method':<12}{'ATE':>10}{'PSNR':>9}{'SSIM':>8}{'LPIPS':>8}{'RPE-t':>10}{'RPE-r':>9}"
        row = (f"{method:<12}{fmt(self.ate_rmse, 6):>10}{fmt(self.psnr_mean, 2):>9}{fmt(self.ssim_mean, 3):>8}"
               f"{'n/a':>8}{fmt(self.rpe_trans, 6):>10}{fmt(self.rpe_rot, 4):>9}")
        return head + "\n" + row + "\n"


def evaluate(estimated, ground_truth, rendered=None, targets=None, align="sim3"):
    """Full report; ``rendered``/``targets`` are optional per-frame image lists."""
    ate, aligned = ate_rmse(estimated, ground_truth, align)
    ate_series = np.linalg.norm(_positions(aligned) - _positions(ground_truth), axis=1)
    tr, rot = rpe_series(aligned, ground_truth, 1)
    tr_s, rot_s = np.r_[0.0, tr], np.r_[0.0, rot]
    rpe_t = float(np.sqrt(np.mean(tr ** 2))) if len(tr) else 0.0
    rpe_r = float(np.sqrt(np.mean(rot ** 2))) if len(rot) else 0.0
    ps = ss = np.zeros(0)
    pm = sm = float("nan")
    if rendered is not None and targets is not None:
        if len(rendered) != len(targets):
            raise ValueError("rendered and target image counts differ")
        ps = np.array([psnr(t, r) for r, t in zip(rendered, targets)])
        ss = np.array([ssim(t, r) for r, t in zip(rendered, targets)])
        pm, sm = float(ps.mean()), float(ss.mean())
    return EvalReport(ate, rpe_t, rpe_r, pm, sm, ate_series, tr_s, rot_s, ps, ss)


def as_pose_list(traj):
    return [p if isinstance(p, Pose) else Pose.from_matrix(p) for p in traj]
