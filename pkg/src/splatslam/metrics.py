"""Quantitative evaluation: trajectory error, image quality, segmentation.

ATE uses a rigid (rotation + translation, no scale) least-squares
alignment of the estimated camera centers onto ground truth before the
RMSE, so a global frame offset does not count as error. PSNR treats a
perfect match as a 99.0 dB sentinel. SSIM is shared with the losses
module so the metric and the loss cannot diverge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Pose, pose_inverse
from .losses import ssim  # noqa: F401  (re-exported as the SSIM metric)

PSNR_SENTINEL = 99.0


def _camera_centers(poses: list[Pose]) -> np.ndarray:
    return np.stack([pose_inverse(p).t for p in poses])


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping src points onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_d - r @ mu_s
    return r, t


def ate_rmse(estimated: list[Pose], ground_truth: list[Pose]) -> float:
    """RMSE of camera-center residuals after rigid alignment, meters."""
    if len(estimated) != len(ground_truth):
        raise ValueError("trajectory lengths differ")
    if len(estimated) < 2:
        raise ValueError("need at least two poses")
    est = _camera_centers(estimated)
    gt = _camera_centers(ground_truth)
    r, t = rigid_align(est, gt)
    res = est @ r.T + t - gt
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; equal inputs give 99.0 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr expects equal shapes")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL))


def miou(pred: np.ndarray, gt: np.ndarray, k_sem: int) -> tuple[list[float], float]:
    """Per-class IoU and the mean over classes present in the union.

    Classes absent from both maps are excluded; classes hallucinated by
    the prediction (absent from gt) score 0 and are included."""
    if pred.shape != gt.shape:
        raise ValueError("miou expects equal shapes")
    ious: list[float] = []
    included: list[float] = []
    for c in range(k_sem):
        p = pred == c
        g = gt == c
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            ious.append(float("nan"))
            continue
        inter = int(np.logical_and(p, g).sum())
        iou = inter / union
        ious.append(iou)
        included.append(iou)
    mean = float(np.mean(included)) if included else 0.0
    return ious, mean


@dataclass
class BiasRow:
    frame_id: int
    pose: Pose
    iterations: int
    psnr: float


@dataclass
class BiasReport:
    mu_psnr: float
    sigma_psnr: float
    rows: list[BiasRow]


def bias_report(
    psnrs: list[float], iterations: list[int], frame_ids: list[int], poses: list[Pose]
) -> BiasReport:
    """Per-keyframe rendering-quality spread under the mapping schedule.

    mu/sigma are the mean and population standard deviation of the
    final-map per-keyframe render PSNR; rows carry what the scatter plot
    needs (pose, iteration count, PSNR)."""
    if not psnrs:
        raise ValueError("bias report needs at least one keyframe")
    arr = np.asarray(psnrs, dtype=np.float64)
    rows = [
        BiasRow(fid, pose, its, p)
        for fid, pose, its, p in zip(frame_ids, poses, iterations, psnrs)
    ]
    return BiasReport(float(arr.mean()), float(arr.std()), rows)
