"""Report figures for a finished run, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ate_rmse  # noqa: E402

DPI = 110


def _centers(poses):
    return np.array([p.t for p in poses], dtype=float).reshape(-1, 3)


def plot_trajectory(poses, ground_truth, keyframe_ids, path):
    """Top-down (x-z) and side (x-y) views of the sim3-aligned estimate against ground truth."""
    est = _centers(poses)
    gt = _centers(ground_truth[:len(poses)]) if ground_truth is not None else None
    if gt is not None and len(est) >= 2:
        _, aligned = ate_rmse(est, gt, "sim3")
        est = aligned
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for ax, (i, j, lab) in zip(axes, [(0, 2, "x-z"), (0, 1, "x-y")]):
        if gt is not None:
            ax.plot(gt[:, i], gt[:, j], "k-", lw=2, alpha=0.35, label="ground truth")
        ax.plot(est[:, i], est[:, j], "-", color="tab:blue", lw=1.2, label="estimate")
        kf = [k for k in keyframe_ids if k < len(est)]
        if kf:
            ax.plot(est[kf, i], est[kf, j], "o", ms=4, mfc="none", color="tab:red", label="keyframes")
        ax.set_xlabel("xyz"[i])
        ax.set_ylabel("xyz"[j])
        ax.set_title(lab)
        ax.axis("equal")
    axes[0].legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_losses(reports, lambda_log, path):
    """Final per-frame loss terms (log scale) and the photometric weight schedule."""
    frames = sorted(reports)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True)
    if frames:
        last = lambda r, name: getattr(r, name)[-1] if len(getattr(r, name)) else np.nan
        for name, lab in [("L_photo", "photometric"), ("L_2d", "2D"), ("L_3d", "3D"), ("total", "total")]:
            vals = np.array([last(reports[f], name) for f in frames], dtype=float)
            vals = np.where(vals > 0, vals, np.nan)
            if np.isfinite(vals).any():
                ax1.semilogy(frames, vals, ".-", lw=1, label=lab)
        ax1.legend(fontsize=8, frameon=False, ncol=4)
    ax1.set_ylabel("loss at final iterate")
    if lambda_log:
        lg = np.array(lambda_log, dtype=float)
        ax2.step(lg[:, 0], lg[:, 1], where="post", color="tab:purple")
    ax2.set_ylim(0, 1.05)
    ax2.set_ylabel(r"$\lambda_p$")
    ax2.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_metrics(evaluation, path):
    """Per-frame ATE and, when renders were scored, PSNR."""
    has_img = evaluation is not None and len(evaluation.psnr_series) > 0
    fig, axes = plt.subplots(2 if has_img else 1, 1, figsize=(7, 5 if has_img else 2.8), sharex=True,
                             squeeze=False)
    axes = axes[:, 0]
    if evaluation is not None:
        axes[0].plot(evaluation.ate_series, color="tab:blue")
        axes[0].set_title(f"ATE rmse {evaluation.ate_rmse:.3g}", fontsize=9)
    axes[0].set_ylabel("position error")
    if has_img:
        axes[1].plot(evaluation.psnr_series, color="tab:green")
        axes[1].set_ylabel("PSNR [dB]")
        axes[1].set_title(f"mean {evaluation.psnr_mean:.2f} dB", fontsize=9)
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_run(res, ground_truth, out_dir):
    """Write trajectory.png, losses.png and metrics.png; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kf_ids = [kf.id for kf in res.keyframes]
    paths = [out / "trajectory.png", out / "losses.png", out / "metrics.png"]
    plot_trajectory(res.poses, ground_truth, kf_ids, paths[0])
    plot_losses(res.reports, res.lambda_log, paths[1])
    plot_metrics(res.evaluation, paths[2])
    return paths
