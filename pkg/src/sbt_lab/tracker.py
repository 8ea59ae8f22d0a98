"""Online tracking: cropping, window-penalized decoding, coordinate
mapping, and dynamic-template updates.

Frame-space boxes are corner form (x, y, w, h) in pixels. The tracker
crops a template patch once at init and a search patch per frame, runs
the model, penalizes the score map with a centered Hanning window, and
maps the decoded box back to frame coordinates through the exact crop
affine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Model
from .errors import ContractError, NumericError
from .head import decode_box


@dataclass
class TrackerConfig:
    window_weight: float = 0.45
    update_threshold: float = 0.6
    update_interval: int = 20
    gamma_z: float = 2.0
    gamma_x: float = 4.0
    size_smoothing: float = 0.7  # weight on the new prediction; 1 disables
    temporal: bool = False


@dataclass
class Affine:
    """Exact crop geometry.

    Frame coordinates are continuous with pixel i covering [i, i+1).
    The crop covers the square [left_x, left_x + side) x [left_y, ...).
    Patch array index p maps to frame array index scale * p + x0 (the
    sampling grid), while normalized patch coordinates in [0,1] map
    through the continuous square.
    """

    scale: float
    x0: float
    y0: float
    out_size: int

    @property
    def side(self) -> float:
        return self.scale * self.out_size

    @property
    def left_x(self) -> float:
        return self.x0 - 0.5 * self.scale + 0.5

    @property
    def left_y(self) -> float:
        return self.y0 - 0.5 * self.scale + 0.5

    def frame_from_norm(self, nx: float, ny: float) -> tuple:
        return self.left_x + nx * self.side, self.left_y + ny * self.side

    def norm_from_frame(self, fx: float, fy: float) -> tuple:
        return (fx - self.left_x) / self.side, (fy - self.left_y) / self.side


def hanning_1d(n: int) -> np.ndarray:
    """Raised cosine with exact 1 at the center cell and 0 at both edges.

    The two sides use their own half-width so even lengths still hit the
    endpoints exactly.
    """
    if n < 3:
        return np.ones(n, dtype=np.float32)
    c = n // 2
    i = np.arange(n, dtype=np.float64)
    left = 0.5 * (1.0 + np.cos(np.pi * (i - c) / c))
    right = 0.5 * (1.0 + np.cos(np.pi * (i - c) / (n - 1 - c)))
    return np.where(i <= c, left, right).astype(np.float32)


def hanning_2d(h: int, w: int) -> np.ndarray:
    return np.outer(hanning_1d(h), hanning_1d(w)).astype(np.float32)


def crop_region(frame: np.ndarray, center: tuple, side: float,
                out_size: int) -> tuple:
    """Square crop with bilinear resize and per-channel mean fill.

    frame is (3, H, W) float. Returns (patch (3, out, out) float32,
    Affine). Sample points outside the frame take the channel mean.
    """
    if side <= 0:
        raise ContractError(f"crop side must be positive, got {side}")
    _, fh, fw = frame.shape
    cx, cy = center
    scale = side / out_size
    x0 = cx - side / 2.0 + 0.5 * scale - 0.5
    y0 = cy - side / 2.0 + 0.5 * scale - 0.5
    aff = Affine(scale, x0, y0, out_size)
    xs = x0 + scale * np.arange(out_size)
    ys = y0 + scale * np.arange(out_size)

    def axis_weights(coords, limit):
        lo = np.floor(coords).astype(np.int64)
        frac = coords - lo
        inside = (coords >= 0.0) & (coords <= limit - 1)
        lo_c = np.clip(lo, 0, limit - 1)
        hi_c = np.clip(lo + 1, 0, limit - 1)
        return lo_c, hi_c, frac, inside

    jx0, jx1, fx, in_x = axis_weights(xs, fw)
    iy0, iy1, fy, in_y = axis_weights(ys, fh)
    f = frame.astype(np.float64)
    top = f[:, iy0][:, :, jx0] * (1 - fx) + f[:, iy0][:, :, jx1] * fx
    bot = f[:, iy1][:, :, jx0] * (1 - fx) + f[:, iy1][:, :, jx1] * fx
    patch = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    mean = frame.reshape(3, -1).mean(axis=1)
    outside = ~(in_y[:, None] & in_x[None, :])
    patch[:, outside] = mean[:, None]
    return patch.astype(np.float32), aff


def _check_box_in_frame(box, frame_shape):
    x, y, w, h = box
    _, fh, fw = frame_shape
    if w <= 0 or h <= 0:
        raise ContractError(f"degenerate box {tuple(box)}")
    if x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise ContractError(f"box {tuple(box)} not inside {fw}x{fh} frame")


class TrackerState:
    def __init__(self, model: Model, config: TrackerConfig, template_patch,
                 dyn_patch, box):
        self.model = model
        self.config = config
        self.template_patch = template_patch
        self.template_patch.flags.writeable = False
        self.prev_box = tuple(float(v) for v in box)
        self.frame_index = 0
        self.last_update_frame = 0
        grid = model.cfg.search_size // 16
        self.hanning = hanning_2d(grid, grid)
        with ad.no_grad():
            self.template_feat = model.encode_early(Tensor(template_patch),
                                                    "template")
        self.dyn_patch = None
        self.dyn_feat = None
        if dyn_patch is not None:
            self.set_dyn_template(dyn_patch)

    def set_dyn_template(self, patch):
        self.dyn_patch = patch
        with ad.no_grad():
            self.dyn_feat = self.model.encode_early(Tensor(patch),
                                                    "dyn_template")

    @property
    def prev_center(self) -> tuple:
        x, y, w, h = self.prev_box
        return x + w / 2.0, y + h / 2.0


def init(frame: np.ndarray, box, model: Model,
         config: Optional[TrackerConfig] = None) -> TrackerState:
    """Start tracking from a frame and its target box (x, y, w, h)."""
    config = config or TrackerConfig()
    _check_box_in_frame(box, frame.shape)
    x, y, w, h = (float(v) for v in box)
    side = config.gamma_z * np.sqrt(w * h)
    patch, _ = crop_region(frame, (x + w / 2.0, y + h / 2.0), side,
                           model.cfg.template_size)
    dyn = patch.copy() if config.temporal else None
    return TrackerState(model, config, patch, dyn, (x, y, w, h))


def track_step(state: TrackerState, frame: np.ndarray) -> tuple:
    """Locate the target in the next frame; returns (box, confidence)."""
    cfg = state.config
    model = state.model
    px, py, pw, ph = state.prev_box
    side = cfg.gamma_x * np.sqrt(pw * ph)
    patch, aff = crop_region(frame, state.prev_center, side,
                             model.cfg.search_size)
    with ad.no_grad():
        x_feat = model.encode_early(Tensor(patch), "search")
        _, f_x = model.forward_joint(state.template_feat, x_feat,
                                     state.dyn_feat)
        out = model.head(f_x)
    score = out.score.data
    if not np.isfinite(score).all():
        raise NumericError("non-finite score map")
    lam = cfg.window_weight
    penalized = (1.0 - lam) * score + lam * state.hanning
    out.score = Tensor(penalized)
    (bx, by, bw, bh), conf, _ = decode_box(out)
    if not all(np.isfinite(v) for v in (bx, by, bw, bh, conf)):
        raise NumericError("non-finite decoded box")
    fx, fy = aff.frame_from_norm(bx, by)
    w_new = bw * side
    h_new = bh * side
    alpha = cfg.size_smoothing
    w_new = alpha * w_new + (1.0 - alpha) * pw
    h_new = alpha * h_new + (1.0 - alpha) * ph
    _, fh, fw = frame.shape
    w_new = min(w_new, fw)
    h_new = min(h_new, fh)
    x_new = min(max(fx - w_new / 2.0, 0.0), fw - w_new)
    y_new = min(max(fy - h_new / 2.0, 0.0), fh - h_new)
    state.prev_box = (x_new, y_new, w_new, h_new)
    state.frame_index += 1
    return state.prev_box, float(conf)


def maybe_update_template(state: TrackerState, frame: np.ndarray,
                          confidence: float) -> bool:
    """Re-crop the dynamic template under the confidence/interval gate."""
    cfg = state.config
    if not cfg.temporal:
        return False
    if confidence <= cfg.update_threshold:
        return False
    if state.frame_index - state.last_update_frame < cfg.update_interval:
        return False
    x, y, w, h = state.prev_box
    side = cfg.gamma_z * np.sqrt(w * h)
    patch, _ = crop_region(frame, (x + w / 2.0, y + h / 2.0), side,
                           state.model.cfg.template_size)
    state.set_dyn_template(patch)
    state.last_update_frame = state.frame_index
    return True
