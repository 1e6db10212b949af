"""Training objective.

Both depth predictions are penalized only where ground truth carries a
measurement, with pixels inside the merged foreground mask upweighted.
The segmentation term exists for reporting: with ground-truth masks it is
exactly zero, and with external masks it is their clipped binary
cross-entropy against the merged ground-truth foreground.  Either way it is
a constant with respect to the network parameters, so it never contributes
gradients; it is added to the total as a plain number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

BCE_CLIP = 1e-7


@dataclass
class LossWeights:
    lambda_init: float = 0.5
    lambda_obj: float = 3.0
    lambda_seg: float = 1.0


@dataclass
class LossBreakdown:
    total: T.Tensor
    final_term: float
    init_term: float
    seg_term: float


def masked_weighted_l1(pred: T.Tensor, gt: T.Tensor, fg_mask: T.Tensor,
                       lambda_obj: float, kind: str = "l1") -> T.Tensor:
    """Weighted mean absolute (or squared) error over measured pixels.

    Weight is ``lambda_obj`` where the merged foreground mask is on and 1
    elsewhere; pixels without ground truth get weight 0.  The sum is
    normalized by the total weight, so the value reads in the units of the
    residual regardless of mask coverage.
    """
    if pred.shape != gt.shape or pred.shape != fg_mask.shape:
        raise ValueError(
            f"pred/gt/mask shapes differ: {pred.shape}, {gt.shape}, {fg_mask.shape}")
    valid = gt.data > 0
    if not valid.any():
        raise ValueError("loss undefined: ground truth has no measured pixels")
    w = np.where(fg_mask.data > 0.5, float(lambda_obj), 1.0) * valid
    total_w = w.sum()
    diff = T.sub(pred, gt)
    if kind == "l1":
        per_pixel = T.absolute(diff)
    elif kind == "l2":
        per_pixel = T.mul(diff, diff)
    else:
        raise ValueError(f"loss kind must be 'l1' or 'l2', got {kind!r}")
    weighted = T.mul(per_pixel, T.Tensor(w.astype(pred.dtype)))
    return T.scale(T.sum_all(weighted), 1.0 / total_w)


def segmentation_bce(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Mean binary cross-entropy with probability clipping; plain number."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = np.clip(pred_mask, BCE_CLIP, 1.0 - BCE_CLIP)
    t = (gt_mask > 0.5).astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def total_loss(d_init: T.Tensor, d_final: T.Tensor, gt: T.Tensor,
               m_seg: T.Tensor, m_gt_foreground: np.ndarray,
               weights: LossWeights, mask_mode: str = "ground_truth",
               loss_kind: str = "l1") -> LossBreakdown:
    """Combine the two depth terms and the constant segmentation term.

    ``m_seg`` is the merged mask the network consumed (it also defines the
    loss weighting); ``m_gt_foreground`` is the ground-truth merged
    foreground used as the BCE target in file mode.
    """
    l_final = masked_weighted_l1(d_final, gt, m_seg, weights.lambda_obj, loss_kind)
    l_init = masked_weighted_l1(d_init, gt, m_seg, weights.lambda_obj, loss_kind)
    if mask_mode == "ground_truth":
        seg = 0.0
    else:
        seg = segmentation_bce(m_seg.data[:, 0], m_gt_foreground)
    total = T.add(l_final, T.scale(l_init, weights.lambda_init))
    seg_contrib = weights.lambda_seg * seg
    if seg_contrib != 0.0:
        total = T.add(total, T.Tensor(np.asarray(seg_contrib, dtype=total.dtype)))
    return LossBreakdown(total=total,
                         final_term=float(l_final.data),
                         init_term=float(l_init.data),
                         seg_term=float(seg))
