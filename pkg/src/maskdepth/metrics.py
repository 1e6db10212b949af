"""Depth error metrics over measured pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Metrics:
    mae: float
    rmse: float
    n_valid: int


def evaluate_depth(pred: np.ndarray, gt: np.ndarray) -> Metrics:
    """MAE and RMSE restricted to pixels where ground truth is measured.

    Values read in the ground-truth units (meters throughout this project).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} does not match gt {gt.shape}")
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("metrics undefined: ground truth has no measured pixels")
    err = pred[valid] - gt[valid]
    return Metrics(mae=float(np.abs(err).mean()),
                   rmse=float(np.sqrt(np.square(err).mean())),
                   n_valid=n)


def aggregate(per_sample: list) -> Metrics:
    """Pool per-sample metrics as if over the union of their valid pixels."""
    if not per_sample:
        raise ValueError("nothing to aggregate")
    total = sum(m.n_valid for m in per_sample)
    mae = sum(m.mae * m.n_valid for m in per_sample) / total
    mse = sum(m.rmse ** 2 * m.n_valid for m in per_sample) / total
    return Metrics(mae=float(mae), rmse=float(np.sqrt(mse)), n_valid=total)
