"""Command-line entry point.

One subcommand per workflow: model inspection (variant-info, flops),
self-checks (selftest), data generation (gen-data), training (train,
pretrain-mim), and inference (track, eval).

Exit codes: 0 success, 1 contract/config/format error (including bad
flags), 2 numeric failure. All numeric output uses fixed 6-decimal
formatting so repeated runs diff cleanly. A variant file given with
--variant-file overrides --variant, which overrides the built-in
default.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import harness as hn
from . import tracker as trk
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, NumericError, SbtError
from .layers import (
    FrmLayer, TokenMap, UrmLayer, ca_dynamic_conv_oracle, concat_maps,
    segment_mask,
)
from .loss import total_loss
from .optim import AdamW, clip_grad_norm

# published parameter counts (millions) for the named variants
REFERENCE_PARAMS_M = {
    "plain-sbt": 86.7,
    "hi-sbt": 21.2,
    "supersbt-light": 21.5,
    "supersbt-small": 34.3,
    "supersbt-base": 65.5,
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag errors through the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_variant_flags(p):
    p.add_argument("--variant", default="supersbt-light",
                   choices=sorted(bb.VARIANT_NAMES),
                   help="named model variant (default: %(default)s)")
    p.add_argument("--variant-file", default=None,
                   help="variant config file; overrides --variant")


def _resolve_variant(args):
    if args.variant_file is not None:
        return bb.load_variant_file(args.variant_file)
    return bb.named_config(args.variant)


def _build_model(args):
    model = bb.build_variant(_resolve_variant(args), seed=args.seed)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is not None:
        bb.load_checkpoint(ckpt, model)
    return model


def _load_frames(path):
    frames = []
    i = 0
    while True:
        fp = os.path.join(path, f"frame_{i}.ppm")
        if not os.path.exists(fp):
            break
        frames.append(hn.read_ppm(fp))
        i += 1
    if len(frames) < 2:
        raise ConfigError(f"{path}: need at least 2 frame_<n>.ppm files")
    return frames


def _parse_box(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"expected x,y,w,h box, got {text!r}")
    try:
        return tuple(float(v) for v in parts)
    except ValueError:
        raise ConfigError(f"non-numeric box component in {text!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_variant_info(args, out):
    cfg = _resolve_variant(args)
    model = bb.build_variant(cfg, seed=args.seed)
    params = bb.count_params(model)
    flops, _ = bb.count_flops(model)
    out.write(f"variant {cfg.name}\n")
    out.write(f"params {params}\n")
    out.write(f"params_m {params / 1e6:.6f}\n")
    ref = REFERENCE_PARAMS_M.get(cfg.name)
    if ref is not None:
        out.write(f"reference_params_m {ref:.6f}\n")
        out.write(f"param_deviation {(params / 1e6 - ref) / ref:+.6f}\n")
    out.write(f"flops {flops}\n")
    out.write(f"flops_g {flops / 1e9:.6f}\n")
    out.write("note flops count one multiply-accumulate as two operations; "
              "tables counting fused MACs report about half this number\n")
    g_z = cfg.grid_side(cfg.template_size, len(cfg.stages) - 1)
    g_x = cfg.grid_side(cfg.search_size, len(cfg.stages) - 1)
    out.write(f"final_tokens template={g_z * g_z} search={g_x * g_x}\n")
    return 0


def cmd_flops(args, out):
    model = bb.build_variant(_resolve_variant(args), seed=args.seed)
    total, breakdown = bb.count_flops(model)
    for label, fl in breakdown:
        out.write(f"layer {label} flops={fl} flops_g={fl / 1e9:.6f}\n")
    out.write(f"total flops={total} flops_g={total / 1e9:.6f}\n")
    return 0


def _selftest_grad_checks(seed, out):
    rng = np.random.default_rng(seed)
    checks = []

    ps = ParamStore()
    frm = FrmLayer(ps, "frm", rng, channels=8, heads=2)
    z = rng.normal(size=(4, 8))
    x = rng.normal(size=(9, 8))

    def f_frm(p):
        zt = TokenMap(Tensor(z.astype(p.dtype)), [(2, 2)], ["template"])
        xt = TokenMap(Tensor(x.astype(p.dtype)), [(3, 3)], ["search"])
        _, xo = frm.attention_update(zt, xt, "CA")
        return ad.sum_(xo * xo)

    checks.append(("frm-ca", f_frm, ps))

    ps2 = ParamStore()
    urm = UrmLayer(ps2, "urm", rng, channels=8, heads=2)

    def f_urm(p):
        zt = TokenMap(Tensor(z.astype(p.dtype)), [(2, 2)], ["template"])
        xt = TokenMap(Tensor(x.astype(p.dtype)), [(3, 3)], ["search"])
        o = urm(concat_maps([zt, xt]))
        return ad.sum_(o.tokens * o.tokens)

    checks.append(("urm", f_urm, ps2))

    worst = 0.0
    for name, f, store in checks:
        err = ad.grad_check(f, store, eps=1e-5, max_coords_per_param=3,
                            rng=np.random.default_rng(seed))
        worst = max(worst, err)
        status = "pass" if err < 1e-5 else "FAIL"
        out.write(f"selftest gradient {name} max_rel_err={err:.3e} {status}\n")
    return worst


def cmd_selftest(args, out):
    worst_grad = _selftest_grad_checks(args.seed, out)

    # attention cross-update against the dynamic-convolution decomposition
    rng = np.random.default_rng(args.seed + 1)
    worst_ca = 0.0
    for _ in range(10):
        ps = ParamStore()
        frm = FrmLayer(ps, "frm", rng, channels=8, heads=2)
        ps.cast_(np.float64)
        zt = TokenMap(Tensor(rng.normal(size=(4, 8))), [(2, 2)], ["template"])
        xt = TokenMap(Tensor(rng.normal(size=(9, 8))), [(3, 3)], ["search"])
        _, xo = frm.attention_update(zt, xt, "CA")
        oracle = ca_dynamic_conv_oracle(zt, xt, frm)
        worst_ca = max(worst_ca, float(np.abs(xo.data - oracle).max()))
    status = "pass" if worst_ca <= 1e-6 else "FAIL"
    out.write(f"selftest dynamic-conv-equivalence max_abs_err="
              f"{worst_ca:.3e} {status}\n")

    # joint attention restricted by segment masks matches the two-stream
    # attention terms
    rng = np.random.default_rng(args.seed + 2)
    worst_urm = 0.0
    for _ in range(10):
        ps = ParamStore()
        urm = UrmLayer(ps, "urm", rng, channels=8, heads=2)
        ps.cast_(np.float64)
        zt = TokenMap(Tensor(rng.normal(size=(4, 8))), [(2, 2)], ["template"])
        xt = TokenMap(Tensor(rng.normal(size=(9, 8))), [(3, 3)], ["search"])
        tm = concat_maps([zt, xt])
        same = urm.attention_update(tm, mask=segment_mask(tm, "same")).data
        zn, xn = tm.with_tokens(urm.ln1(tm.tokens)).split()
        ref = np.vstack([
            urm.attn(zn, zn).data + zt.tokens.data,
            urm.attn(xn, xn).data + xt.tokens.data,
        ])
        worst_urm = max(worst_urm, float(np.abs(same - ref).max()))
    status = "pass" if worst_urm <= 1e-6 else "FAIL"
    out.write(f"selftest joint-attention-reduction max_abs_err="
              f"{worst_urm:.3e} {status}\n")

    if worst_grad >= 1e-5 or worst_ca > 1e-6 or worst_urm > 1e-6:
        raise NumericError("selftest failed")
    out.write("selftest all pass\n")
    return 0


def cmd_gen_data(args, out):
    os.makedirs(args.out, exist_ok=True)
    for k in range(args.sequences):
        seq = hn.gen_sequence(args.seed + k, length=args.length,
                              frame_size=args.frame_size,
                              difficulty=args.difficulty)
        hn.save_sequence(seq, args.out)
        out.write(f"wrote {os.path.join(args.out, seq.name)} "
                  f"frames={args.length}\n")
    return 0


def cmd_train(args, out):
    model = _build_model(args)
    seqs = hn.load_dataset(args.data)

    def log(step, parts):
        out.write(
            f"step {step} total={parts['total']:.6f} cls={parts['cls']:.6f} "
            f"giou={parts['giou']:.6f} l1={parts['l1']:.6f}\n"
        )

    hn.train_loop(model, seqs, steps=args.steps, lr=args.lr,
                  weight_decay=args.weight_decay, seed=args.seed,
                  log_every=args.log_every, log_fn=log)
    bb.save_checkpoint(model, args.out)
    out.write(f"saved {args.out}\n")
    return 0


def cmd_pretrain_mim(args, out):
    model = _build_model(args)
    seqs = hn.load_dataset(args.data)
    pre = bb.MimPretrainer(model, seed=args.seed)
    opt_enc = AdamW(model.store, lr=args.lr, weight_decay=1e-4, strict=False)
    opt_dec = AdamW(pre.store, lr=args.lr, weight_decay=1e-4)
    rng = np.random.default_rng(args.seed)
    for step in range(args.steps):
        seq = seqs[int(rng.integers(0, len(seqs)))]
        _, search, _ = hn.sample_pair(seq, model.cfg, rng, jitter=True)
        loss = bb.mim_pretrain_step(model, pre, [Tensor(search)],
                                    args.mask_ratio, rng)
        clip_grad_norm(model.store, 1.0)
        clip_grad_norm(pre.store, 1.0)
        opt_enc.step()
        opt_dec.step()
        if step % args.log_every == 0 or step == args.steps - 1:
            out.write(f"step {step} recon={loss.item():.6f}\n")
    bb.save_checkpoint(model, args.out)
    out.write(f"saved {args.out}\n")
    return 0


def _tracker_config(args):
    return trk.TrackerConfig(window_weight=args.window_weight,
                             temporal=args.temporal)


def cmd_track(args, out):
    model = _build_model(args)
    frames = _load_frames(args.video)
    box = _parse_box(args.init)
    cfg = _tracker_config(args)
    state = trk.init(frames[0].astype(np.float32) / 255.0, box, model, cfg)
    lines = [f"0,{box[0]:.6f},{box[1]:.6f},{box[2]:.6f},{box[3]:.6f}"]
    for i, frame in enumerate(frames[1:], start=1):
        f = frame.astype(np.float32) / 255.0
        (x, y, w, h), conf = trk.track_step(state, f)
        trk.maybe_update_template(state, f, conf)
        lines.append(f"{i},{x:.6f},{y:.6f},{w:.6f},{h:.6f}")
    text = "\n".join(lines) + "\n"
    out.write(text)
    if args.out is not None:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text)
    return 0


def cmd_eval(args, out):
    model = _build_model(args)
    seqs = hn.load_dataset(args.data)
    metrics = hn.evaluate(model, seqs, config=_tracker_config(args),
                          jobs=args.jobs)
    report = hn.format_report(metrics)
    out.write(report)
    if args.out is not None:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(report)
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="sbt-lab",
                     description="single-branch transformer tracking lab")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=42,
                       help="deterministic seed (default: %(default)s)")
        return p

    p = add("variant-info", cmd_variant_info,
            "print parameter/FLOP figures for a model variant")
    _add_variant_flags(p)

    p = add("flops", cmd_flops, "print the per-layer FLOP breakdown")
    _add_variant_flags(p)

    add("selftest", cmd_selftest,
        "run gradient and attention-equivalence checks")

    p = add("gen-data", cmd_gen_data, "generate a synthetic sequence corpus")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sequences", type=int, default=hn.DEFAULT_TRAIN_SEQS,
                   help="number of sequences (default: %(default)s)")
    p.add_argument("--length", type=int, default=hn.DEFAULT_LENGTH,
                   help="frames per sequence (default: %(default)s)")
    p.add_argument("--frame-size", type=int, default=hn.DEFAULT_FRAME_SIZE,
                   help="square frame side in pixels (default: %(default)s)")
    p.add_argument("--difficulty", default="easy", choices=hn.DIFFICULTIES,
                   help="sequence style (default: %(default)s)")

    p = add("train", cmd_train, "train a variant on a sequence corpus")
    _add_variant_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--checkpoint", default=None,
                   help="initial weights to fine-tune from")
    p.add_argument("--steps", type=int, default=2000,
                   help="optimizer steps (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-4,
                   help="learning rate (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=1e-4,
                   help="decoupled weight decay (default: %(default)s)")
    p.add_argument("--log-every", type=int, default=50,
                   help="steps between loss lines (default: %(default)s)")

    p = add("pretrain-mim", cmd_pretrain_mim,
            "masked-patch reconstruction pretraining")
    _add_variant_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--checkpoint", default=None,
                   help="initial weights to continue from")
    p.add_argument("--steps", type=int, default=500,
                   help="optimizer steps (default: %(default)s)")
    p.add_argument("--mask-ratio", type=float, default=0.75,
                   help="fraction of patches hidden (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-4,
                   help="learning rate (default: %(default)s)")
    p.add_argument("--log-every", type=int, default=50,
                   help="steps between loss lines (default: %(default)s)")

    p = add("track", cmd_track, "track one target through a frame directory")
    _add_variant_flags(p)
    p.add_argument("--video", required=True,
                   help="directory of frame_<n>.ppm files")
    p.add_argument("--init", required=True,
                   help="frame-1 target box as x,y,w,h pixels")
    p.add_argument("--checkpoint", default=None, help="trained weights")
    p.add_argument("--out", default=None, help="box CSV output path")
    p.add_argument("--window-weight", type=float, default=0.45,
                   help="score-window mixing weight (default: %(default)s)")
    p.add_argument("--temporal", action="store_true",
                   help="enable dynamic-template updates")

    p = add("eval", cmd_eval, "evaluate tracking metrics over a dataset")
    _add_variant_flags(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", default=None, help="trained weights")
    p.add_argument("--out", default=None, help="report output path")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel sequences (default: %(default)s)")
    p.add_argument("--window-weight", type=float, default=0.45,
                   help="score-window mixing weight (default: %(default)s)")
    p.add_argument("--temporal", action="store_true",
                   help="enable dynamic-template updates")

    return parser


def run(argv, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "fn", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.fn(args, out)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SbtError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
