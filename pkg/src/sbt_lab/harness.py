"""Synthetic sequences, toy training, evaluation, and reports.

Sequences are procedurally generated videos of one textured target
moving over a textured background, with exact ground-truth boxes in
corner form (x, y, w, h) pixels. On disk a sequence is a directory of
binary PPM frames plus a gt.csv.
"""

from __future__ import annotations

import concurrent.futures
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import tracker as trk
from .autodiff import Tensor
from .backbone import Model
from .errors import ConfigError, ContractError, FormatError, NumericError
from .loss import total_loss
from .optim import AdamW, clip_grad_norm

DIFFICULTIES = ("easy", "distractor", "scale-change")

DEFAULT_FRAME_SIZE = 256
DEFAULT_LENGTH = 60
DEFAULT_TRAIN_SEQS = 64
DEFAULT_EVAL_SEQS = 16

BRIGHTNESS_JITTER = 0.10
# translation must move the target several grid cells off center, or
# "predict the crop center" becomes a local minimum the tracker cannot
# recover from once the target drifts
TRANSLATION_JITTER = 0.22  # fraction of the search-crop side
SCALE_JITTER = 0.15


@dataclass
class SyntheticSequence:
    frames: list  # uint8 (3, H, W) per frame
    gt: list  # (x, y, w, h) float pixels per frame
    seed: int
    difficulty: str
    name: str = ""


def max_threads() -> int:
    cap = os.environ.get("SBT_LAB_THREADS")
    if cap is not None:
        try:
            n = int(cap)
        except ValueError:
            raise ConfigError(f"SBT_LAB_THREADS must be an integer, got {cap!r}")
        if n < 1:
            raise ConfigError("SBT_LAB_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# sequence generation
# ---------------------------------------------------------------------------

def _smooth_noise(rng, h, w, cells=8):
    # muted, blurred color field: background cells must stay lower-contrast
    # and softer-edged than any target, or the frame is full of object-like
    # block boundaries that drown out the target's saliency
    coarse = rng.uniform(0.3, 0.7, size=(3, cells, cells))
    reps = (h + cells - 1) // cells
    big = np.kron(coarse, np.ones((reps, reps)))[:, :h, :w]
    big = uniform_filter(big, size=(1, reps, reps), mode="nearest")
    fine = rng.uniform(-0.04, 0.04, size=(3, h, w))
    return np.clip(big + fine, 0.0, 1.0)


def _object_texture(rng, size):
    ys, xs = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(2.0, 6.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    base = rng.uniform(0.2, 0.8, size=3)
    tex = np.stack([
        base[c] + 0.35 * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase[c])
        for c in range(3)
    ])
    return np.clip(tex, 0.0, 1.0)


def _paint(frame, tex, mask, x, y):
    h, w = mask.shape
    fy, fx = int(round(y)), int(round(x))
    frame[:, fy:fy + h, fx:fx + w] = np.where(
        mask, tex[:, :h, :w], frame[:, fy:fy + h, fx:fx + w])


def _shape_mask(rng, w, h):
    if rng.uniform() < 0.5:
        ys, xs = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        return ((xs - cx) / (w / 2.0)) ** 2 + ((ys - cy) / (h / 2.0)) ** 2 <= 1.0
    return np.ones((h, w), dtype=bool)


def iou_corner(a, b) -> float:
    """IoU of two corner-form (x, y, w, h) boxes."""
    ax0, ay0, ax1, ay1 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx0, by0, bx1, by1 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    # rounding in the corner arithmetic can land just outside [0, 1]
    return float(min(max(inter / union, 0.0), 1.0))


def gen_sequence(seed: int, length: int = DEFAULT_LENGTH,
                 frame_size: int = DEFAULT_FRAME_SIZE,
                 difficulty: str = "easy") -> SyntheticSequence:
    """Deterministic textured target on textured noise, exact gt."""
    if length < 2:
        raise ContractError(f"sequence length must be >= 2, got {length}")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    s = frame_size
    bg = _smooth_noise(rng, s, s)
    base_w = rng.uniform(0.12, 0.22) * s
    aspect = rng.uniform(0.8, 1.25)
    base_h = base_w * aspect
    tex_size = int(np.ceil(max(base_w, base_h) * 1.4)) + 2
    tex = _object_texture(rng, tex_size)
    margin = 2.0
    cx = rng.uniform(base_w / 2 + margin, s - base_w / 2 - margin)
    cy = rng.uniform(base_h / 2 + margin, s - base_h / 2 - margin)
    vx, vy = rng.uniform(-3.0, 3.0, size=2)
    scale = 1.0

    distractors = []
    if difficulty == "distractor":
        for _ in range(rng.integers(2, 5)):
            dw = base_w * rng.uniform(0.8, 1.2)
            dh = base_h * rng.uniform(0.8, 1.2)
            dtex = _object_texture(rng, int(np.ceil(max(dw, dh))) + 2)
            dx = rng.uniform(dw / 2 + margin, s - dw / 2 - margin)
            dy = rng.uniform(dh / 2 + margin, s - dh / 2 - margin)
            dvx, dvy = rng.uniform(-2.0, 2.0, size=2)
            distractors.append([dx, dy, dvx, dvy, dw, dh, dtex])

    frames, gt = [], []
    for _ in range(length):
        if difficulty == "scale-change":
            scale = float(np.clip(scale * rng.uniform(0.97, 1.03), 0.7, 1.4))
        w = base_w * scale
        h = base_h * scale
        vx = float(np.clip(vx + rng.uniform(-0.8, 0.8), -4.0, 4.0))
        vy = float(np.clip(vy + rng.uniform(-0.8, 0.8), -4.0, 4.0))
        cx = float(np.clip(cx + vx, w / 2 + margin, s - w / 2 - margin))
        cy = float(np.clip(cy + vy, h / 2 + margin, s - h / 2 - margin))
        box = (cx - w / 2, cy - h / 2, w, h)

        frame = bg.copy()
        for d in distractors:
            d[2] = float(np.clip(d[2] + rng.uniform(-0.6, 0.6), -3.0, 3.0))
            d[3] = float(np.clip(d[3] + rng.uniform(-0.6, 0.6), -3.0, 3.0))
            for _try in range(40):
                nx = float(np.clip(d[0] + d[2], d[4] / 2 + margin,
                                   s - d[4] / 2 - margin))
                ny = float(np.clip(d[1] + d[3], d[5] / 2 + margin,
                                   s - d[5] / 2 - margin))
                dbox = (nx - d[4] / 2, ny - d[5] / 2, d[4], d[5])
                if iou_corner(dbox, box) <= 0.3:
                    d[0], d[1] = nx, ny
                    break
                d[2] = float(rng.uniform(-3.0, 3.0))
                d[3] = float(rng.uniform(-3.0, 3.0))
            else:
                continue  # keep the distractor where it was if legal moves ran out
            iw, ih = int(round(d[4])), int(round(d[5]))
            mask = np.ones((ih, iw), dtype=bool)
            _paint(frame, d[6], mask, d[0] - d[4] / 2, d[1] - d[5] / 2)

        iw, ih = int(round(w)), int(round(h))
        mask = _shape_mask(np.random.default_rng(seed + 1), iw, ih)
        _paint(frame, tex[:, :ih, :iw], mask, box[0], box[1])
        frames.append((frame * 255.0).astype(np.uint8))
        gt.append(tuple(float(v) for v in box))
    return SyntheticSequence(frames, gt, seed, difficulty,
                             name=f"seq_{seed}")


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """image is uint8 (3, H, W); written as binary P6."""
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise FormatError(f"{path} is not a binary PPM (P6) file")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    pixels = raw[m.end():]
    if len(pixels) < 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(pixels[:3 * w * h], dtype=np.uint8)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()


def save_sequence(seq: SyntheticSequence, root, name: Optional[str] = None):
    name = name or seq.name
    d = os.path.join(root, name)
    os.makedirs(d, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(os.path.join(d, f"frame_{i}.ppm"), frame)
    with open(os.path.join(d, "gt.csv"), "w", encoding="ascii") as fh:
        for i, (x, y, w, h) in enumerate(seq.gt):
            fh.write(f"{i},{x:.6f},{y:.6f},{w:.6f},{h:.6f}\n")


def load_sequence(path) -> SyntheticSequence:
    gt_path = os.path.join(path, "gt.csv")
    try:
        with open(gt_path, "r", encoding="ascii") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise FormatError(f"cannot read {gt_path}: {e}")
    gt = []
    for ln in lines:
        parts = ln.split(",")
        if len(parts) != 5:
            raise FormatError(f"{gt_path}: expected frame_idx,x,y,w,h: {ln!r}")
        idx = int(parts[0])
        if idx != len(gt):
            raise FormatError(f"{gt_path}: non-contiguous frame index {idx}")
        gt.append(tuple(float(v) for v in parts[1:]))
    frames = []
    for i in range(len(gt)):
        frames.append(read_ppm(os.path.join(path, f"frame_{i}.ppm")))
    if len(frames) < 2:
        raise FormatError(f"{path}: sequence needs at least 2 frames")
    return SyntheticSequence(frames, gt, seed=-1, difficulty="easy",
                             name=os.path.basename(os.path.normpath(path)))


def load_dataset(root) -> list:
    names = sorted(
        n for n in os.listdir(root)
        if n.startswith("seq_") and os.path.isdir(os.path.join(root, n))
    )
    if not names:
        raise FormatError(f"no seq_<id> directories under {root}")
    return [load_sequence(os.path.join(root, n)) for n in names]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def sample_pair(seq: SyntheticSequence, model_cfg, rng,
                jitter: bool = True) -> tuple:
    """Crop a (template, search, gt-box) training triple from a sequence.

    Returns (template patch, search patch, normalized center-form gt in
    search-patch coordinates).
    """
    n = len(seq.frames)
    ti = int(rng.integers(0, n))
    si = int(rng.integers(0, n))
    tx, ty, tw, th = seq.gt[ti]
    t_frame = seq.frames[ti].astype(np.float32) / 255.0
    t_side = 2.0 * np.sqrt(tw * th)
    template, _ = trk.crop_region(t_frame, (tx + tw / 2, ty + th / 2), t_side,
                                  model_cfg.template_size)

    gx, gy, gw, gh = seq.gt[si]
    s_frame = seq.frames[si].astype(np.float32) / 255.0
    side = 4.0 * np.sqrt(gw * gh)
    cx, cy = gx + gw / 2, gy + gh / 2
    if jitter:
        side *= 1.0 + float(rng.uniform(-SCALE_JITTER, SCALE_JITTER))
        cx += float(rng.uniform(-1, 1)) * TRANSLATION_JITTER * side
        cy += float(rng.uniform(-1, 1)) * TRANSLATION_JITTER * side
    out = model_cfg.search_size
    search, aff = trk.crop_region(s_frame, (cx, cy), side, out)
    if jitter:
        b = 1.0 + float(rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER))
        search = np.clip(search * b, 0.0, 1.0)
        tb = 1.0 + float(rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER))
        template = np.clip(template * tb, 0.0, 1.0)
    nx, ny = aff.norm_from_frame(gx + gw / 2, gy + gh / 2)
    gt_norm = (nx, ny, gw / aff.side, gh / aff.side)
    return template, search, gt_norm


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    components: list = field(default_factory=list)


def train_loop(model: Model, sequences, steps: int, lr: float = 1e-4,
               weight_decay: float = 1e-4, seed: int = 42,
               jitter: bool = True, log_every: int = 50,
               log_fn: Optional[Callable] = None,
               fixed_sample: Optional[tuple] = None,
               stop_fn: Optional[Callable] = None,
               grad_clip: float = 1.0) -> TrainResult:
    """AdamW training over sampled pairs; aborts on non-finite loss.

    fixed_sample, when given, overrides sampling entirely (overfit mode).
    stop_fn(step, parts), when given, ends training early after the step
    whose recorded losses make it return True. Gradients are clipped to
    a global L2 norm of grad_clip (single-sample steps spike hard enough
    to saturate the score head for good); pass 0 to disable.
    """
    rng = np.random.default_rng(seed)
    opt = AdamW(model.store, lr=lr, weight_decay=weight_decay)
    result = TrainResult()
    for step in range(steps):
        if fixed_sample is not None:
            template, search, gt = fixed_sample
        else:
            seq = sequences[int(rng.integers(0, len(sequences)))]
            template, search, gt = sample_pair(seq, model.cfg, rng,
                                               jitter=jitter)
        _, f_x = model.forward_pair(Tensor(template), Tensor(search))
        out = model.head(f_x)
        loss, parts = total_loss(out, gt)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss at step {step}")
        model.store.zero_grad()
        ad.backward(loss)
        if grad_clip:
            clip_grad_norm(model.store, grad_clip)
        opt.step()
        result.losses.append(parts["total"])
        result.components.append(parts)
        if log_fn is not None and (step % log_every == 0 or step == steps - 1):
            log_fn(step, parts)
        if stop_fn is not None and stop_fn(step, parts):
            break
    return result


# ---------------------------------------------------------------------------
# metrics / evaluation
# ---------------------------------------------------------------------------

SUCCESS_THRESHOLDS = np.arange(0, 21) * 0.05
PRECISION_PIXELS = 20.0


@dataclass
class SequenceMetrics:
    name: str
    ao: float
    auc: float
    precision: float
    ious: list


@dataclass
class Metrics:
    per_sequence: list
    ao: float
    auc: float
    precision: float


def sequence_metrics(name, pred_boxes, gt_boxes) -> SequenceMetrics:
    """Metrics over frames 2..N (frame 1 is initialization)."""
    ious, errs = [], []
    for p, g in zip(pred_boxes, gt_boxes):
        ious.append(iou_corner(p, g))
        pc = (p[0] + p[2] / 2, p[1] + p[3] / 2)
        gc = (g[0] + g[2] / 2, g[1] + g[3] / 2)
        errs.append(float(np.hypot(pc[0] - gc[0], pc[1] - gc[1])))
    ious_arr = np.array(ious)
    # small slack so an exact match rounding to 1 - 1e-16 still clears
    # the top threshold
    success = [(ious_arr >= t - 1e-9).mean() for t in SUCCESS_THRESHOLDS]
    return SequenceMetrics(
        name=name,
        ao=float(ious_arr.mean()),
        auc=float(np.mean(success)),
        precision=float((np.array(errs) <= PRECISION_PIXELS).mean()),
        ious=ious,
    )


def aggregate(per_sequence) -> Metrics:
    return Metrics(
        per_sequence=list(per_sequence),
        ao=float(np.mean([m.ao for m in per_sequence])),
        auc=float(np.mean([m.auc for m in per_sequence])),
        precision=float(np.mean([m.precision for m in per_sequence])),
    )


def run_tracker_on_sequence(model: Model, seq: SyntheticSequence,
                            config: Optional[trk.TrackerConfig] = None) -> list:
    """One-pass tracking; gt is read only for frame-1 initialization."""
    frames = [f.astype(np.float32) / 255.0 for f in seq.frames]
    state = trk.init(frames[0], seq.gt[0], model, config)
    boxes = []
    for frame in frames[1:]:
        box, conf = trk.track_step(state, frame)
        trk.maybe_update_template(state, frame, conf)
        boxes.append(box)
    return boxes


def evaluate(model: Model, sequences,
             config: Optional[trk.TrackerConfig] = None,
             jobs: int = 1,
             tracker_fn: Optional[Callable] = None) -> Metrics:
    """Track every sequence and aggregate metrics.

    tracker_fn(seq) -> predicted boxes for frames 2..N overrides the
    model-driven tracker (used for baseline comparisons).
    """
    for seq in sequences:
        if model is not None and tracker_fn is None:
            _, fh, fw = seq.frames[0].shape
            if fh < model.cfg.search_size // 4 or fw < model.cfg.search_size // 4:
                raise ConfigError(
                    f"frame size {fw}x{fh} too small for search size "
                    f"{model.cfg.search_size}"
                )

    def one(seq):
        if tracker_fn is not None:
            boxes = tracker_fn(seq)
        else:
            boxes = run_tracker_on_sequence(model, seq, config)
        return sequence_metrics(seq.name, boxes, seq.gt[1:])

    jobs = max(1, min(jobs, max_threads()))
    if jobs == 1:
        per = [one(s) for s in sequences]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            per = list(pool.map(one, sequences))
    return aggregate(per)


def static_baseline(seq: SyntheticSequence) -> list:
    """Predicts the frame-1 box forever."""
    return [seq.gt[0]] * (len(seq.frames) - 1)


def format_report(metrics: Metrics) -> str:
    """One line-record per sequence plus one aggregate record."""
    lines = []
    for m in metrics.per_sequence:
        lines.append(
            f"seq name={m.name} ao={m.ao:.6f} auc={m.auc:.6f} "
            f"precision={m.precision:.6f}"
        )
    lines.append(
        f"aggregate sequences={len(metrics.per_sequence)} ao={metrics.ao:.6f} "
        f"auc={metrics.auc:.6f} precision={metrics.precision:.6f}"
    )
    return "\n".join(lines) + "\n"
