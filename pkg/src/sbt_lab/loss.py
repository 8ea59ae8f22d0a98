"""Training targets and the tracking objective.

Boxes in model space are normalized center form (cx, cy, w, h) in [0,1].
The total objective is classification (penalty-reduced focal on a
Gaussian heatmap) plus box regression (GIoU and L1) evaluated at the
ground-truth peak cell.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .head import HeadOutput

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0


def peak_cell(box, grid) -> tuple:
    """Quantized (i, j) cell of the box center on an (h, w) grid."""
    h, w = grid
    cx, cy = float(box[0]), float(box[1])
    i = min(h - 1, max(0, int(cy * h)))
    j = min(w - 1, max(0, int(cx * w)))
    return i, j


def sigma_for_box(box, grid) -> float:
    """Size-adaptive Gaussian spread, in grid cells."""
    h, w = grid
    wg, hg = float(box[2]) * w, float(box[3]) * h
    return max(0.5, np.sqrt(wg * hg) / 6.0)


def gaussian_target(box, grid) -> np.ndarray:
    """Heatmap with exact peak 1 at the quantized center cell."""
    h, w = grid
    if float(box[2]) <= 0 or float(box[3]) <= 0:
        raise ContractError(f"degenerate box {tuple(box)}")
    if not (0.0 <= float(box[0]) <= 1.0 and 0.0 <= float(box[1]) <= 1.0):
        raise ContractError(f"box center {tuple(box[:2])} outside [0,1]^2")
    i, j = peak_cell(box, grid)
    sigma = sigma_for_box(box, grid)
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (ys - i) ** 2 + (xs - j) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def focal_loss(pred: Tensor, target) -> Tensor:
    """Penalty-reduced focal objective, normalized by the peak count."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != t.shape:
        raise ContractError(
            f"pred/target shapes differ: {pred.data.shape} vs {t.shape}"
        )
    if pred.data.min() <= 0.0 or pred.data.max() >= 1.0:
        raise NumericError("focal loss needs predictions strictly inside (0,1)")
    peaks = t == 1.0
    n_peaks = int(peaks.sum())
    if n_peaks == 0:
        raise ContractError("target has no exact-1 peak; use gaussian_target")
    one_minus = 1.0 - pred
    pos = ad.mul(ad.mul(one_minus ** FOCAL_ALPHA, ad.log(pred)),
                 peaks.astype(pred.dtype))
    neg_w = ((1.0 - t) ** FOCAL_BETA * (~peaks)).astype(pred.dtype)
    neg = ad.mul(ad.mul(pred ** FOCAL_ALPHA, ad.log(one_minus)), neg_w)
    return ad.mul(ad.sum_(ad.add(pos, neg)), -1.0 / n_peaks)


def _corners(box):
    """Split a center-form (4,) box Tensor into corner scalars."""
    cx = ad.index(box, (0,))
    cy = ad.index(box, (1,))
    w = ad.index(box, (2,))
    h = ad.index(box, (3,))
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def _maximum(a, b):
    return ad.add(a, ad.relu(b - a))


def _minimum(a, b):
    return a - ad.relu(a - b)


def box_losses(pred_box: Tensor, gt_box) -> tuple:
    """(L1, 1 - GIoU) between center-form normalized boxes."""
    gt = np.asarray(gt_box, dtype=pred_box.dtype)
    if gt.shape != (4,) or pred_box.data.shape != (4,):
        raise ContractError("boxes must be 4-vectors (cx, cy, w, h)")
    if gt[2] <= 0 or gt[3] <= 0 or pred_box.data[2] <= 0 or pred_box.data[3] <= 0:
        raise ContractError("boxes must have positive size")
    l1 = ad.mean(ad.absolute(ad.add(pred_box, -gt)))

    px0, py0, px1, py1 = _corners(pred_box)
    gx0, gy0, gx1, gy1 = _corners(Tensor(gt))
    iw = ad.relu(_minimum(px1, gx1) - _maximum(px0, gx0))
    ih = ad.relu(_minimum(py1, gy1) - _maximum(py0, gy0))
    inter = ad.mul(iw, ih)
    area_p = ad.mul(px1 - px0, py1 - py0)
    area_g = ad.mul(gx1 - gx0, gy1 - gy0)
    union = ad.add(ad.add(area_p, area_g), ad.mul(inter, -1.0))
    hull = ad.mul(_maximum(px1, gx1) - _minimum(px0, gx0),
                  _maximum(py1, gy1) - _minimum(py0, gy0))
    iou = ad.mul(inter, union ** -1.0)
    giou = iou - ad.mul(hull - union, hull ** -1.0)
    return l1, ad.add(ad.mul(giou, -1.0), 1.0)


def pred_box_at_cell(out: HeadOutput, cell: tuple) -> Tensor:
    """Differentiable (cx, cy, w, h) box read at one grid cell."""
    i, j = cell
    h, w = out.grid
    cx = ad.add(ad.index(out.offset, (0, i, j)), j / w)
    cy = ad.add(ad.index(out.offset, (1, i, j)), i / h)
    parts = [cx, cy, ad.index(out.size, (0, i, j)), ad.index(out.size, (1, i, j))]
    return ad.concat([ad.reshape(p, (1,)) for p in parts], axis=0)


def total_loss(out: HeadOutput, gt_box) -> tuple:
    """L = L_cls + 2 * L_giou + 5 * L_1, regression at the gt peak cell.

    Returns (loss Tensor, component dict of floats).
    """
    target = gaussian_target(gt_box, out.grid)
    cls = focal_loss(out.score, target)
    cell = peak_cell(gt_box, out.grid)
    pred = pred_box_at_cell(out, cell)
    l1, giou = box_losses(pred, gt_box)
    loss = ad.add(cls, ad.add(ad.mul(giou, LAMBDA_IOU), ad.mul(l1, LAMBDA_L1)))
    parts = {
        "cls": float(cls.data), "giou": float(giou.data),
        "l1": float(l1.data), "total": float(loss.data),
    }
    return loss, parts
