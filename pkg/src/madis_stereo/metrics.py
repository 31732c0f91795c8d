"""Disparity error metrics over a set of valid pixels.

D1 follows the KITTI convention: a pixel is an outlier when its error
exceeds both 3 px and 5% of the true disparity.
"""

from __future__ import annotations

import numpy as np

METRIC_COLUMNS = ("avgerr", "rmse", "bad@0.5", "bad@1.0", "bad@2.0", "bad@3.0")


def _errors(d, d_gt, valid) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if d.shape != d_gt.shape or valid.shape != d.shape:
        raise ValueError(f"shape mismatch: {d.shape}, {d_gt.shape}, {valid.shape}")
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    return np.abs(d[valid] - d_gt[valid]), d_gt[valid]


def avgerr(d, d_gt, valid) -> float:
    err, _ = _errors(d, d_gt, valid)
    return float(err.mean())


def rmse(d, d_gt, valid) -> float:
    err, _ = _errors(d, d_gt, valid)
    return float(np.sqrt((err * err).mean()))


def bad_tau(d, d_gt, valid, tau: float) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    err, _ = _errors(d, d_gt, valid)
    return float(100.0 * (err > tau).mean())


def d1(d, d_gt, valid, region=None) -> float:
    """KITTI D1 outlier percentage; ``region`` restricts to e.g. a foreground mask."""
    valid = np.asarray(valid, dtype=bool)
    if region is not None:
        valid = valid & np.asarray(region, dtype=bool)
    err, gt = _errors(d, d_gt, valid)
    if np.any(gt <= 0):
        raise ValueError("D1 needs positive ground-truth disparity on the valid set")
    return float(100.0 * ((err > 3.0) & (err > 0.05 * gt)).mean())


def evaluate(d, d_gt, valid) -> dict[str, float]:
    """The six-column metric row."""
    return {
        "avgerr": avgerr(d, d_gt, valid),
        "rmse": rmse(d, d_gt, valid),
        "bad@0.5": bad_tau(d, d_gt, valid, 0.5),
        "bad@1.0": bad_tau(d, d_gt, valid, 1.0),
        "bad@2.0": bad_tau(d, d_gt, valid, 2.0),
        "bad@3.0": bad_tau(d, d_gt, valid, 3.0),
    }
