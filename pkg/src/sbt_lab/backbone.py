"""Variant assembly, joint forward passes, cost counting, masked-image
pretraining, and checkpoint I/O.

A variant is a staged token pipeline: patch embed, shallow per-image
stages, then a final stage that fuses template and search tokens (joint
self-attention over the concatenation, or interleaved self/cross
attention), followed by a prediction head.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot_normal, trunc_normal
from .errors import ConfigError, DimensionError, FormatError
from .head import ConvHead, MixMlpHead
from .layers import (
    Attention, FrmLayer, LayerNormParams, LocalLayer, PatchEmbed, PatchMerge,
    RelBiasTable, TokenMap, UrmLayer, concat_maps, map_from_image,
)

TOTAL_STRIDE = 16

STAGE_OPERATORS = ("mlp-local", "srg", "vg")
PE_MODES = ("abs", "rel", "cond", "none")
PATTERNS = ("urm", "interleave")
HEADS = ("conv", "mixmlp")
INTER_STAGE = ("merge", "conv")


@dataclass
class StageConfig:
    operator: str
    channels: int
    blocks: int
    heads: int = 1
    mlp_ratio: float = 4.0
    sr_ratio: int = 1


@dataclass
class VariantConfig:
    name: str
    stages: list
    embed_kernel: int
    embed_stride: int
    embed_padding: int = 0
    inter_stage: str = "merge"
    pe: str = "rel"
    pattern: str = "urm"
    head: str = "mixmlp"
    template_size: int = 128
    search_size: int = 256

    def validate(self):
        if not self.stages:
            raise ConfigError("variant needs at least one stage")
        stride = self.embed_stride * 2 ** (len(self.stages) - 1)
        if stride != TOTAL_STRIDE:
            raise ConfigError(
                f"total stride {stride} != {TOTAL_STRIDE} "
                f"(embed stride {self.embed_stride}, {len(self.stages)} stages)"
            )
        if self.pe not in PE_MODES:
            raise ConfigError(f"unknown PE mode {self.pe}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown layer pattern {self.pattern}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head type {self.head}")
        if self.inter_stage not in INTER_STAGE:
            raise ConfigError(f"unknown inter-stage op {self.inter_stage}")
        for i, st in enumerate(self.stages):
            last = i == len(self.stages) - 1
            if st.operator not in STAGE_OPERATORS:
                raise ConfigError(f"unknown stage operator {st.operator}")
            if st.blocks < 1 or st.channels < 1:
                raise ConfigError("stage blocks/channels must be positive")
            if st.operator != "mlp-local" and st.channels % st.heads:
                raise ConfigError(
                    f"stage {i + 1}: channels {st.channels} not divisible "
                    f"by heads {st.heads}"
                )
            if last and st.operator == "mlp-local":
                raise ConfigError("final stage must be an attention stage")
        if self.pattern == "urm" and self.stages[-1].operator != "vg":
            raise ConfigError("joint self-attention pattern needs a VG final stage")
        if self.search_size % TOTAL_STRIDE or self.template_size % TOTAL_STRIDE:
            raise ConfigError("input sizes must be multiples of the total stride")

    def grid_side(self, image_side: int, stage: int) -> int:
        side = (image_side + 2 * self.embed_padding
                - self.embed_kernel) // self.embed_stride + 1
        return side // 2 ** stage


_NAMED = {}


def _register_named():
    _NAMED["plain-sbt"] = VariantConfig(
        name="plain-sbt",
        stages=[StageConfig("vg", 768, 12, heads=12)],
        embed_kernel=16, embed_stride=16,
        inter_stage="conv", pe="abs", pattern="interleave", head="conv",
    )
    _NAMED["hi-sbt"] = VariantConfig(
        name="hi-sbt",
        stages=[
            StageConfig("srg", 128, 3, heads=1, sr_ratio=8),
            StageConfig("srg", 256, 4, heads=2, sr_ratio=4),
            StageConfig("srg", 320, 10, heads=5, sr_ratio=2),
        ],
        embed_kernel=7, embed_stride=4, embed_padding=3,
        inter_stage="conv", pe="cond", pattern="interleave", head="conv",
    )
    for suffix, blocks in (("light", 6), ("small", 10), ("base", 20)):
        _NAMED[f"supersbt-{suffix}"] = VariantConfig(
            name=f"supersbt-{suffix}",
            stages=[
                StageConfig("mlp-local", 128, 2, mlp_ratio=3.0),
                StageConfig("mlp-local", 256, 2, mlp_ratio=3.0),
                StageConfig("vg", 512, blocks, heads=8),
            ],
            embed_kernel=4, embed_stride=4,
            inter_stage="merge", pe="rel", pattern="urm", head="mixmlp",
        )


_register_named()

VARIANT_NAMES = tuple(sorted(_NAMED))


def named_config(name: str) -> VariantConfig:
    if name not in _NAMED:
        raise ConfigError(
            f"unknown variant {name!r}; known: {', '.join(VARIANT_NAMES)}"
        )
    cfg = _NAMED[name]
    return replace(cfg, stages=[replace(s) for s in cfg.stages])


# ---------------------------------------------------------------------------
# config file parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "name": str, "embed_kernel": int, "embed_stride": int,
    "embed_padding": int, "inter_stage": str, "pe": str, "pattern": str,
    "head": str, "template_size": int, "search_size": int,
}
_STAGE_KEYS = {
    "operator": str, "channels": int, "blocks": int, "heads": int,
    "mlp_ratio": float, "sr_ratio": int,
}


def parse_variant_config(text: str) -> VariantConfig:
    """Line-based `key = value` text with [stageN] section headers."""
    top: dict = {}
    stages: dict[int, dict] = {}
    section: Optional[int] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            tag = line[1:-1].strip()
            if not tag.startswith("stage"):
                raise ConfigError(f"line {lineno}: unknown section [{tag}]")
            try:
                section = int(tag[len("stage"):])
            except ValueError:
                raise ConfigError(f"line {lineno}: bad stage section [{tag}]")
            if section < 1:
                raise ConfigError(f"line {lineno}: stage numbers start at 1")
            stages.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        schema = _TOP_KEYS if section is None else _STAGE_KEYS
        if key not in schema:
            where = "top level" if section is None else f"[stage{section}]"
            raise ConfigError(f"line {lineno}: unknown key {key!r} at {where}")
        try:
            parsed = schema[key](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}")
        target = top if section is None else stages[section]
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target[key] = parsed
    if not stages:
        raise ConfigError("config defines no stages")
    if sorted(stages) != list(range(1, len(stages) + 1)):
        raise ConfigError("stage sections must be contiguous from [stage1]")
    stage_cfgs = []
    for i in range(1, len(stages) + 1):
        s = stages[i]
        for req in ("operator", "channels", "blocks"):
            if req not in s:
                raise ConfigError(f"[stage{i}] missing required key {req!r}")
        stage_cfgs.append(StageConfig(**s))
    for req in ("embed_kernel", "embed_stride"):
        if req not in top:
            raise ConfigError(f"missing required key {req!r}")
    top.setdefault("name", "custom")
    cfg = VariantConfig(stages=stage_cfgs, **top)
    cfg.validate()
    return cfg


def load_variant_file(path) -> VariantConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_variant_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def sincos_2d(channels: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table, (h*w, channels)."""
    if channels % 4:
        raise ConfigError("sincos table needs channels divisible by 4")
    d = channels // 4
    omega = 1.0 / 10000.0 ** (np.arange(d) / d)
    ys, xs = np.mgrid[0:h, 0:w]
    ys, xs = ys.ravel()[:, None] * omega, xs.ravel()[:, None] * omega
    out = np.concatenate(
        [np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class _InterConv:
    """Stride-2 overlapping conv between stages (k=4, pad=1)."""

    def __init__(self, store: ParamStore, prefix: str, rng, c_in: int,
                 c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(f"{prefix}.w", glorot_normal(
            rng, (c_out, c_in, 4, 4), c_in * 16, c_out))
        self.b = store.add(f"{prefix}.b", np.zeros(c_out, dtype=np.float32))

    def __call__(self, tm: TokenMap) -> TokenMap:
        img = tm.to_image()
        out = ad.conv2d(img, self.w, self.b, stride=2, padding=1)
        return map_from_image(out, tm.segments[0])

    def flops(self, h: int, w: int) -> int:
        return 2 * (h // 2) * (w // 2) * self.c_out * self.c_in * 16


def _frm_self(frm: FrmLayer, tm: TokenMap) -> TokenMap:
    """Run one FRM block as pure self-attention on a single image map."""
    normed = tm.with_tokens(frm.ln1(tm.tokens))
    t = ad.add(tm.tokens, frm.attn(normed, normed))
    t = ad.add(t, frm.mlp(frm.ln2(t), layout=tm.layout()))
    return tm.with_tokens(t)


class Model:
    """A built variant: parameter store plus the derived layer graph."""

    def __init__(self, config: VariantConfig, seed: int = 42):
        config.validate()
        self.cfg = config
        self.seed = seed
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        stages = config.stages
        cond = config.pe == "cond"

        self.embed = PatchEmbed(self.store, "embed", rng, 3, stages[0].channels,
                                kernel=config.embed_kernel,
                                stride=config.embed_stride,
                                padding=config.embed_padding)
        self.stage_blocks: list[list] = []
        self.inter_ops: list = []
        for si, st in enumerate(stages):
            last = si == len(stages) - 1
            blocks = []
            for bi in range(st.blocks):
                prefix = f"stage{si + 1}.block{bi}"
                if st.operator == "mlp-local":
                    blocks.append(LocalLayer(self.store, prefix, rng,
                                             st.channels,
                                             mlp_ratio=st.mlp_ratio))
                elif last and config.pattern == "urm":
                    blocks.append(UrmLayer(self.store, prefix, rng, st.channels,
                                           st.heads, mlp_ratio=st.mlp_ratio,
                                           cond_pe=cond))
                else:
                    mode = "SRG" if st.operator == "srg" else "VG"
                    blocks.append(FrmLayer(self.store, prefix, rng, st.channels,
                                           st.heads, mlp_ratio=st.mlp_ratio,
                                           attn_mode=mode,
                                           sr_ratio=st.sr_ratio,
                                           cond_pe=cond))
            self.stage_blocks.append(blocks)
            if not last:
                nxt = stages[si + 1]
                if config.inter_stage == "merge":
                    self.inter_ops.append(PatchMerge(
                        self.store, f"inter{si + 1}", rng, st.channels,
                        nxt.channels))
                else:
                    self.inter_ops.append(_InterConv(
                        self.store, f"inter{si + 1}", rng, st.channels,
                        nxt.channels))

        self.bias_tables: Optional[list] = None
        if config.pe == "rel" and config.pattern == "urm":
            max_side = config.search_size // TOTAL_STRIDE
            self.bias_tables = [
                RelBiasTable(self.store, f"stage{len(stages)}.block{bi}.relbias",
                             rng, max_side=max_side, heads=stages[-1].heads)
                for bi in range(stages[-1].blocks)
            ]

        # the blocks are pre-norm, so the residual stream is unnormalized;
        # without this closing norm its magnitude grows with depth and
        # training time until the heads' sigmoids saturate
        c_last = stages[-1].channels
        self.final_ln = LayerNormParams(self.store, "final_ln", c_last)
        if config.head == "conv":
            self.head = ConvHead(self.store, "head", rng, c_last)
        else:
            tokens = (config.search_size // TOTAL_STRIDE) ** 2
            self.head = MixMlpHead(self.store, "head", rng, c_last, tokens)

        self._abs_pe: dict = {}

    # -- forward -------------------------------------------------------

    def _abs_table(self, h: int, w: int, c: int) -> np.ndarray:
        key = (h, w, c)
        if key not in self._abs_pe:
            self._abs_pe[key] = sincos_2d(c, h, w)
        return self._abs_pe[key]

    def encode_early(self, image: Tensor, tag: str) -> TokenMap:
        """Embed one image and run every stage before the joint stage.

        Inputs are centered first: with raw [0, 1] intensities the shared
        gray level sums coherently over every embed patch and swamps the
        texture signal the tracker needs.
        """
        tm = self.embed(ad.add(image, -0.5), tag)
        if self.cfg.pe == "abs":
            h, w = tm.grid
            tm = tm.with_tokens(ad.add(tm.tokens,
                                       self._abs_table(h, w, tm.channels)))
        for blocks, inter in zip(self.stage_blocks[:-1], self.inter_ops):
            for blk in blocks:
                tm = blk(tm) if isinstance(blk, LocalLayer) else _frm_self(blk, tm)
            tm = inter(tm)
        return tm

    def forward_joint(self, z: TokenMap, x: TokenMap,
                      dyn: Optional[TokenMap] = None):
        """Run the joint final stage; returns (f_z, f_x)."""
        blocks = self.stage_blocks[-1]
        if self.cfg.pattern == "urm":
            parts = [z] + ([dyn] if dyn is not None else []) + [x]
            zx = concat_maps(parts)
            tables = self.bias_tables or [None] * len(blocks)
            for blk, table in zip(blocks, tables):
                zx = blk(zx, bias_table=table)
            zx = zx.with_tokens(self.final_ln(zx.tokens))
            return zx.segment("template"), zx.segment("search")
        zmap = z if dyn is None else concat_maps([z, dyn])
        xmap = x
        for i, blk in enumerate(blocks):
            mode = "SA" if i % 2 == 0 else "CA"
            zmap, xmap = blk(zmap, xmap, mode)
        f_z = zmap if zmap.is_single() else zmap.segment("template")
        f_z = f_z.with_tokens(self.final_ln(f_z.tokens))
        return f_z, xmap.with_tokens(self.final_ln(xmap.tokens))

    def _check_size(self, image: Tensor, side: int, what: str):
        if image.data.shape != (3, side, side):
            raise DimensionError(
                f"{what} image shape {image.data.shape} != (3, {side}, {side})"
            )

    def forward_pair(self, template: Tensor, search: Tensor,
                     dyn_template: Optional[Tensor] = None):
        """Full pass: per-image shallow stages, then the joint stage."""
        self._check_size(template, self.cfg.template_size, "template")
        self._check_size(search, self.cfg.search_size, "search")
        z = self.encode_early(template, "template")
        x = self.encode_early(search, "search")
        dyn = None
        if dyn_template is not None:
            self._check_size(dyn_template, self.cfg.template_size,
                             "dynamic template")
            dyn = self.encode_early(dyn_template, "dyn_template")
        return self.forward_joint(z, x, dyn)

    def predict(self, template: Tensor, search: Tensor,
                dyn_template: Optional[Tensor] = None):
        f_z, f_x = self.forward_pair(template, search, dyn_template)
        return self.head(f_x)


def build_variant(spec, seed: int = 42) -> Model:
    """Build a model from a known variant name or a VariantConfig."""
    if isinstance(spec, str):
        spec = named_config(spec)
    return Model(spec, seed=seed)


def count_params(m: Model) -> int:
    return m.store.num_values()


def count_flops(m: Model):
    """Analytic forward cost for one (template, search) pair.

    Returns (total, breakdown) with one (label, flops) entry per layer.
    """
    cfg = m.cfg
    entries: list[tuple[str, int]] = []
    sides = {
        "z": cfg.grid_side(cfg.template_size, 0),
        "x": cfg.grid_side(cfg.search_size, 0),
    }
    entries.append(("embed", m.embed.flops(cfg.template_size, cfg.template_size)
                    + m.embed.flops(cfg.search_size, cfg.search_size)))
    n_stages = len(cfg.stages)
    for si, blocks in enumerate(m.stage_blocks[:-1]):
        lz, lx = sides["z"] ** 2, sides["x"] ** 2
        for bi, blk in enumerate(blocks):
            if isinstance(blk, LocalLayer):
                fl = blk.flops(lz) + blk.flops(lx)
            else:
                fl = blk.flops(lz, lx, "SA")
            entries.append((f"stage{si + 1}.block{bi}", fl))
        inter = m.inter_ops[si]
        entries.append((f"inter{si + 1}",
                        inter.flops(sides["z"], sides["z"])
                        + inter.flops(sides["x"], sides["x"])))
        sides["z"] //= 2
        sides["x"] //= 2
    lz, lx = sides["z"] ** 2, sides["x"] ** 2
    for bi, blk in enumerate(m.stage_blocks[-1]):
        if cfg.pattern == "urm":
            fl = blk.flops(lz + lx)
        else:
            fl = blk.flops(lz, lx, "SA" if bi % 2 == 0 else "CA")
        entries.append((f"stage{n_stages}.block{bi}", fl))
    entries.append(("head", m.head.flops(lx)))
    return sum(f for _, f in entries), entries


# ---------------------------------------------------------------------------
# masked-image pretraining
# ---------------------------------------------------------------------------

class MimPretrainer:
    """Pixel-reconstruction pretraining head over a variant encoder.

    Shallow stages run densely (their depthwise convs cannot skip
    tokens); masked tokens are dropped at the final-stage entry. A small
    joint-attention decoder with a learned mask token reconstructs the
    per-patch-normalized pixels of the masked patches.
    """

    def __init__(self, model: Model, channels: int = 256, blocks: int = 2,
                 heads: int = 8, seed: int = 0):
        self.model = model
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c_enc = model.cfg.stages[-1].channels
        self.grid = model.cfg.search_size // TOTAL_STRIDE
        self.patch_dim = 3 * TOTAL_STRIDE * TOTAL_STRIDE
        add = self.store.add
        self.proj_w = add("proj.w", glorot_normal(
            rng, (c_enc, channels), c_enc, channels))
        self.proj_b = add("proj.b", np.zeros(channels, dtype=np.float32))
        self.mask_token = add("mask_token", trunc_normal(rng, (1, channels)))
        self.blocks = [
            UrmLayer(self.store, f"dec{i}", rng, channels, heads)
            for i in range(blocks)
        ]
        from .layers import LayerNormParams
        self.ln = LayerNormParams(self.store, "dec_ln", channels)
        # small output projection: untrained reconstruction stays near
        # zero so the initial loss equals the pixel variance baseline
        self.out_w = add("out.w", trunc_normal(rng, (channels, self.patch_dim)))
        self.out_b = add("out.b", np.zeros(self.patch_dim, dtype=np.float32))
        self.pe = sincos_2d(channels, self.grid, self.grid)

    def split_indices(self, mask_ratio: float, rng: np.random.Generator):
        length = self.grid * self.grid
        if not 0.0 < mask_ratio < 1.0:
            raise ConfigError(f"mask ratio {mask_ratio} outside (0, 1)")
        n_mask = int(round(length * mask_ratio))
        if n_mask < 1 or length - n_mask < 1:
            raise ConfigError(
                f"mask ratio {mask_ratio} leaves no masked or no visible tokens"
            )
        perm = rng.permutation(length)
        return np.sort(perm[length - n_mask:]), np.sort(perm[:length - n_mask])

    def patch_targets(self, image: np.ndarray) -> np.ndarray:
        """Per-patch-normalized pixels, (tokens, patch_dim)."""
        s, g = TOTAL_STRIDE, self.grid
        p = image.reshape(3, g, s, g, s).transpose(1, 3, 0, 2, 4)
        p = p.reshape(g * g, self.patch_dim).astype(np.float64)
        mu = p.mean(axis=1, keepdims=True)
        sd = np.sqrt(p.var(axis=1, keepdims=True) + 1e-6)
        return ((p - mu) / sd).astype(image.dtype)

    def loss(self, image: Tensor, mask_ratio: float,
             rng: np.random.Generator) -> Tensor:
        model = self.model
        model._check_size(image, model.cfg.search_size, "pretraining")
        masked, visible = self.split_indices(mask_ratio, rng)
        tm = model.encode_early(image, "search")
        if tm.length != self.grid * self.grid:
            raise DimensionError("encoder token count mismatch")
        vis = TokenMap(ad.take_rows(tm.tokens, visible),
                       [(1, len(visible))], ["search"])
        for blk in model.stage_blocks[-1]:
            # masked training is single-image; every block acts as SA
            vis = blk(vis) if isinstance(blk, UrmLayer) else _frm_self(blk, vis)
        enc = ad.linear(model.final_ln(vis.tokens), self.proj_w, self.proj_b)
        fill = ad.take_rows(self.mask_token,
                            np.zeros(len(masked), dtype=np.intp))
        row_of = np.empty(self.grid * self.grid, dtype=np.intp)
        row_of[visible] = np.arange(len(visible))
        row_of[masked] = len(visible) + np.arange(len(masked))
        full = ad.take_rows(ad.concat([enc, fill], axis=0), row_of)
        dtm = TokenMap(ad.add(full, self.pe.astype(full.data.dtype)),
                       [(self.grid, self.grid)], ["search"])
        for blk in self.blocks:
            dtm = blk(dtm)
        pred = ad.linear(self.ln(dtm.tokens), self.out_w, self.out_b)
        target = self.patch_targets(image.data)
        diff = ad.add(ad.take_rows(pred, masked), -target[masked])
        return ad.mean(diff * diff)


def mim_pretrain_step(model: Model, pretrainer: MimPretrainer, images,
                      mask_ratio: float, rng: np.random.Generator) -> Tensor:
    """Mean masked-reconstruction loss over a batch; gradients populated."""
    if pretrainer.model is not model:
        raise ConfigError("pretrainer was built for a different model")
    model.store.zero_grad()
    pretrainer.store.zero_grad()
    losses = [pretrainer.loss(img, mask_ratio, rng) for img in images]
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    total = ad.mul(total, 1.0 / len(losses))
    ad.backward(total)
    return total


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SBTC"
CHECKPOINT_VERSION = 1


def save_checkpoint(m: Model, path):
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    items = list(m.store.items())
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(items))
    for name, p in items:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", 0, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def _read(raw: bytes, off: int, n: int):
    if off + n > len(raw):
        raise FormatError("checkpoint truncated")
    return raw[off:off + n], off + n


def load_checkpoint(path, m: Model) -> Model:
    """Load parameters into a built model; shapes must match exactly."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}")
    if len(raw) < 16:
        raise FormatError("checkpoint truncated")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise FormatError("checkpoint CRC mismatch")
    body = raw[:-4]
    off = 0
    magic, off = _read(body, off, 4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    header, off = _read(body, off, 8)
    version, count = struct.unpack("<II", header)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        b, off = _read(body, off, 2)
        nlen = struct.unpack("<H", b)[0]
        nb, off = _read(body, off, nlen)
        name = nb.decode("utf-8")
        b, off = _read(body, off, 2)
        dtype_tag, rank = struct.unpack("<BB", b)
        if dtype_tag != 0:
            raise FormatError(f"unknown dtype tag {dtype_tag} for {name}")
        b, off = _read(body, off, 4 * rank)
        shape = struct.unpack(f"<{rank}I", b)
        size = int(np.prod(shape)) if rank else 1
        b, off = _read(body, off, 4 * size)
        state[name] = np.frombuffer(b, dtype="<f4").reshape(shape)
    if off != len(body):
        raise FormatError("trailing bytes after checkpoint entries")
    names = set(m.store.names())
    if set(state) != names:
        missing = sorted(names - set(state))[:3]
        extra = sorted(set(state) - names)[:3]
        raise FormatError(
            f"checkpoint/config parameter set mismatch "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, p in m.store.items():
        if state[name].shape != p.data.shape:
            raise FormatError(
                f"shape mismatch for {name}: checkpoint {state[name].shape} "
                f"vs config {p.data.shape}"
            )
    for name, p in m.store.items():
        p.data = state[name].astype(p.data.dtype)
        p.grad = None
    return m
