"""Building layers for single-branch transformer tracking.

Token maps carry per-segment grid metadata so the same layer code serves
single-image maps (shallow stages) and concatenated template/search maps
(main stage). All layers are pure functions of (inputs, parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot_normal, trunc_normal
from .errors import ConfigError, ContractError, DimensionError

SEGMENT_TAGS = ("template", "dyn_template", "search")


@dataclass
class TokenMap:
    """(L, C) tokens plus grid shape and segment tag per token block."""

    tokens: Tensor
    grids: list  # [(h, w)] per segment
    segments: list  # tag per segment

    def __post_init__(self):
        if len(self.grids) != len(self.segments):
            raise ContractError("grids/segments length mismatch")
        for tag in self.segments:
            if tag not in SEGMENT_TAGS:
                raise ContractError(f"unknown segment tag: {tag}")
        total = sum(h * w for h, w in self.grids)
        if self.tokens.data.shape[0] != total:
            raise DimensionError(
                f"token count {self.tokens.data.shape[0]} != grid total {total}"
            )

    @property
    def length(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.data.shape[1]

    def layout(self) -> tuple:
        return tuple(zip(self.segments, self.grids))

    def is_single(self) -> bool:
        return len(self.segments) == 1

    @property
    def grid(self):
        if not self.is_single():
            raise ContractError("grid is only defined for single-segment maps")
        return self.grids[0]

    def segment_slices(self) -> list:
        out, off = [], 0
        for h, w in self.grids:
            out.append(slice(off, off + h * w))
            off += h * w
        return out

    def split(self) -> list:
        return [
            TokenMap(ad.index(self.tokens, (sl, slice(None))), [g], [t])
            for sl, g, t in zip(self.segment_slices(), self.grids, self.segments)
        ]

    def segment(self, tag: str):
        for sl, g, t in zip(self.segment_slices(), self.grids, self.segments):
            if t == tag:
                return TokenMap(ad.index(self.tokens, (sl, slice(None))), [g], [t])
        raise ContractError(f"no segment tagged {tag}")

    def to_image(self) -> Tensor:
        h, w = self.grid
        return ad.reshape(ad.transpose(self.tokens, (1, 0)), (self.channels, h, w))

    def with_tokens(self, tokens: Tensor) -> "TokenMap":
        return TokenMap(tokens, list(self.grids), list(self.segments))


def map_from_image(feat: Tensor, tag: str) -> TokenMap:
    """(C,h,w) feature map -> row-major (h*w, C) token map."""
    c, h, w = feat.data.shape
    tokens = ad.transpose(ad.reshape(feat, (c, h * w)), (1, 0))
    return TokenMap(tokens, [(h, w)], [tag])


def concat_maps(maps: Sequence[TokenMap]) -> TokenMap:
    tokens = ad.concat([m.tokens for m in maps], axis=0)
    grids, segs = [], []
    for m in maps:
        grids += m.grids
        segs += m.segments
    return TokenMap(tokens, grids, segs)


def _seg_class(tag: str) -> int:
    """Relative-bias pair classes: templates (incl. dynamic) vs search."""
    return 1 if tag == "search" else 0


# ---------------------------------------------------------------------------
# patch embedding / merging
# ---------------------------------------------------------------------------

class PatchEmbed:
    """Strided conv tokenization of an RGB image."""

    def __init__(self, store: ParamStore, prefix: str, rng, in_ch: int,
                 channels: int, kernel: int, stride: int, padding: int = 0):
        self.kernel, self.stride, self.channels = kernel, stride, channels
        self.padding = padding
        self.in_ch = in_ch
        self.w = store.add(f"{prefix}.w", glorot_normal(
            rng, (channels, in_ch, kernel, kernel),
            in_ch * kernel * kernel, channels))
        self.b = store.add(f"{prefix}.b", np.zeros(channels, dtype=np.float32))

    def __call__(self, image: Tensor, tag: str) -> TokenMap:
        _, h, w = image.data.shape
        if self.kernel == self.stride and (h % self.stride or w % self.stride):
            raise DimensionError(
                f"image {h}x{w} not divisible by patch stride {self.stride}"
            )
        feat = ad.conv2d(image, self.w, self.b, stride=self.stride,
                         padding=self.padding)
        return map_from_image(feat, tag)

    def flops(self, h: int, w: int) -> int:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return 2 * ho * wo * self.channels * self.in_ch * self.kernel ** 2


class PatchMerge:
    """2x2 token grouping + linear 4*C_in -> C_out; halves each grid side."""

    def __init__(self, store: ParamStore, prefix: str, rng, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.w = store.add(f"{prefix}.w", glorot_normal(
            rng, (4 * c_in, c_out), 4 * c_in, c_out))
        self.b = store.add(f"{prefix}.b", np.zeros(c_out, dtype=np.float32))

    def __call__(self, tm: TokenMap) -> TokenMap:
        h, w = tm.grid
        if h % 2 or w % 2:
            raise DimensionError(f"patch merge needs even grid sides, got {h}x{w}")
        c = tm.channels
        t = ad.reshape(tm.tokens, (h // 2, 2, w // 2, 2, c))
        t = ad.transpose(t, (0, 2, 1, 3, 4))
        t = ad.reshape(t, (h * w // 4, 4 * c))
        out = ad.linear(t, self.w, self.b)
        return TokenMap(out, [(h // 2, w // 2)], list(tm.segments))

    def flops(self, h: int, w: int) -> int:
        return 2 * (h * w // 4) * 4 * self.c_in * self.c_out


# ---------------------------------------------------------------------------
# relative position bias
# ---------------------------------------------------------------------------

class RelBiasTable:
    """Learned additive attention bias keyed by clipped 2-D offset and the
    4-way (template/search -> template/search) pair type."""

    def __init__(self, store: ParamStore, prefix: str, rng, max_side: int,
                 heads: int):
        self.max_side = max_side
        self.heads = heads
        self.span = 2 * max_side - 1
        self.table = store.add(
            f"{prefix}.table",
            trunc_normal(rng, (4 * self.span * self.span, heads)))
        self._idx_cache: dict = {}

    def _indices(self, q_layout: tuple, k_layout: tuple) -> np.ndarray:
        key = (q_layout, k_layout)
        cached = self._idx_cache.get(key)
        if cached is not None:
            return cached
        span, ms = self.span, self.max_side

        def coords(layout):
            ys, xs, cls = [], [], []
            for tag, (h, w) in layout:
                yy, xx = np.mgrid[0:h, 0:w]
                ys.append(yy.ravel())
                xs.append(xx.ravel())
                cls.append(np.full(h * w, _seg_class(tag)))
            return np.concatenate(ys), np.concatenate(xs), np.concatenate(cls)

        qy, qx, qc = coords(q_layout)
        ky, kx, kc = coords(k_layout)
        dy = np.clip(qy[:, None] - ky[None, :], -(ms - 1), ms - 1)
        dx = np.clip(qx[:, None] - kx[None, :], -(ms - 1), ms - 1)
        pair = 2 * qc[:, None] + kc[None, :]
        idx = (pair * span * span + (dy + ms - 1) * span + (dx + ms - 1)).astype(np.intp)
        self._idx_cache[key] = idx
        return idx

    def bias(self, q_layout: tuple, k_layout: tuple) -> Tensor:
        """(heads, Lq, Lk) additive pre-softmax bias."""
        idx = self._indices(q_layout, k_layout)
        lq, lk = idx.shape
        rows = ad.take_rows(self.table, idx.reshape(-1))
        return ad.transpose(ad.reshape(rows, (lq, lk, self.heads)), (2, 0, 1))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class Attention:
    """Multi-head scaled dot-product attention over token maps.

    mode "VG": all kv tokens; "SRG": kv grid reduced by a depthwise conv
    with kernel=stride=r; "VL"/"SL": (shifted) window attention, single
    image maps only.
    """

    def __init__(self, store: ParamStore, prefix: str, rng, channels: int,
                 heads: int, mode: str = "VG", sr_ratio: int = 1,
                 window: int = 8):
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if mode not in ("VG", "SRG", "VL", "SL"):
            raise ConfigError(f"unknown attention mode {mode}")
        if mode == "SRG" and sr_ratio < 1:
            raise ConfigError("SRG needs sr_ratio >= 1")
        self.channels, self.heads = channels, heads
        self.head_dim = channels // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.mode = mode
        self.sr_ratio = sr_ratio if mode == "SRG" else 1
        self.window = window
        add = store.add
        self.wq = add(f"{prefix}.wq", glorot_normal(
            rng, (channels, channels), channels, channels))
        self.wk = add(f"{prefix}.wk", glorot_normal(
            rng, (channels, channels), channels, channels))
        self.wv = add(f"{prefix}.wv", glorot_normal(
            rng, (channels, channels), channels, channels))
        self.wo = add(f"{prefix}.wo", glorot_normal(
            rng, (channels, channels), channels, channels))
        self.bq = add(f"{prefix}.bq", np.zeros(channels, dtype=np.float32))
        self.bk = add(f"{prefix}.bk", np.zeros(channels, dtype=np.float32))
        self.bv = add(f"{prefix}.bv", np.zeros(channels, dtype=np.float32))
        self.bo = add(f"{prefix}.bo", np.zeros(channels, dtype=np.float32))
        if self.sr_ratio > 1:
            r = self.sr_ratio
            self.sr_w = add(f"{prefix}.sr_w", glorot_normal(
                rng, (channels, 1, r, r), r * r, r * r))
            self.sr_b = add(f"{prefix}.sr_b", np.zeros(channels, dtype=np.float32))

    def _reduce_kv(self, kv: TokenMap) -> TokenMap:
        r = self.sr_ratio
        parts = []
        for seg in (kv.split() if not kv.is_single() else [kv]):
            h, w = seg.grid
            if h % r or w % r:
                raise DimensionError(f"kv grid {h}x{w} not divisible by r={r}")
            img = seg.to_image()
            red = ad.conv2d(img, self.sr_w, self.sr_b, stride=r, padding=0,
                            groups=self.channels)
            parts.append(map_from_image(red, seg.segments[0]))
        return parts[0] if len(parts) == 1 else concat_maps(parts)

    def _heads(self, t: Tensor, length: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (length, self.heads, self.head_dim)),
                            (1, 0, 2))

    def __call__(self, q_src: TokenMap, kv_src: TokenMap,
                 bias: Optional[Tensor] = None,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        if q_src.channels != self.channels or kv_src.channels != self.channels:
            raise DimensionError(
                f"token channels {q_src.channels}/{kv_src.channels} != "
                f"attention channels {self.channels}"
            )
        if self.mode in ("VL", "SL"):
            if bias is not None or mask is not None:
                raise ConfigError("window attention takes no bias/mask")
            return self._window_attention(q_src, kv_src)
        kv = self._reduce_kv(kv_src) if self.sr_ratio > 1 else kv_src
        lq, lk = q_src.length, kv.length
        q = self._heads(ad.linear(q_src.tokens, self.wq, self.bq), lq)
        k = self._heads(ad.linear(kv.tokens, self.wk, self.bk), lk)
        v = self._heads(ad.linear(kv.tokens, self.wv, self.bv), lk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.scale)
        if bias is not None:
            scores = ad.add(scores, bias)
        if mask is not None:
            scores = ad.add(scores, mask)
        attn = ad.softmax_lastdim(scores)
        out = ad.matmul(attn, v)  # (H, Lq, d)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (lq, self.channels))
        return ad.linear(out, self.wo, self.bo)

    def _window_attention(self, q_src: TokenMap, kv_src: TokenMap) -> Tensor:
        if q_src is not kv_src:
            raise ConfigError(
                "local window attention is a single-image operator; "
                "cross-image VL/SL is not supported"
            )
        h, w = q_src.grid  # raises for concatenated maps
        win = self.window
        if h % win or w % win:
            raise DimensionError(f"grid {h}x{w} not divisible by window {win}")
        tokens = q_src.tokens
        perm = None
        if self.mode == "SL":
            # cyclic shift by half a window, attend, shift back
            s = win // 2
            yy, xx = np.mgrid[0:h, 0:w]
            perm = (((yy + s) % h) * w + (xx + s) % w).ravel()
            tokens = ad.take_rows(tokens, perm)
        c, hd, nh = self.channels, self.head_dim, self.heads
        nwy, nwx = h // win, w // win
        nw, lw = nwy * nwx, win * win
        t = ad.reshape(tokens, (nwy, win, nwx, win, c))
        t = ad.reshape(ad.transpose(t, (0, 2, 1, 3, 4)), (nw * lw, c))

        def split_heads(x):
            x = ad.reshape(x, (nw, lw, nh, hd))
            return ad.transpose(x, (0, 2, 1, 3))  # (nw, H, lw, d)

        q = split_heads(ad.linear(t, self.wq, self.bq))
        k = split_heads(ad.linear(t, self.wk, self.bk))
        v = split_heads(ad.linear(t, self.wv, self.bv))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), self.scale)
        out = ad.matmul(ad.softmax_lastdim(scores), v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (nw, lw, c))
        out = ad.reshape(out, (nwy, nwx, win, win, c))
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3, 4)), (h * w, c))
        if perm is not None:
            out = ad.take_rows(out, np.argsort(perm))
        return ad.linear(out, self.wo, self.bo)

    def flops(self, lq: int, lkv: int) -> int:
        c = self.channels
        if self.mode in ("VL", "SL"):
            lw = self.window ** 2
            return 4 * c * c * lq + 2 * c * lq * lw
        r = self.sr_ratio
        lred = lkv // (r * r)
        total = 2 * c * c * lq + 2 * c * c * lred + 2 * c * lq * lred
        if r > 1:
            total += 2 * lred * c * r * r  # depthwise reduction conv
        return total


def attention(q_src: TokenMap, kv_src: TokenMap, p: Attention,
              bias: Optional[Tensor] = None,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Functional form of multi-head attention over token maps."""
    return p(q_src, kv_src, bias=bias, mask=mask)


# ---------------------------------------------------------------------------
# MLP (with optional conditional-PE depthwise conv)
# ---------------------------------------------------------------------------

class Mlp:
    def __init__(self, store: ParamStore, prefix: str, rng, channels: int,
                 hidden: int, cond_pe: bool = False):
        self.channels, self.hidden, self.cond_pe = channels, hidden, cond_pe
        self.w1 = store.add(f"{prefix}.w1", glorot_normal(
            rng, (channels, hidden), channels, hidden))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden, dtype=np.float32))
        self.w2 = store.add(f"{prefix}.w2", glorot_normal(
            rng, (hidden, channels), hidden, channels))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(channels, dtype=np.float32))
        if cond_pe:
            self.pe_w = store.add(f"{prefix}.pe_w", glorot_normal(
                rng, (hidden, 1, 3, 3), 9, 9))
            self.pe_b = store.add(f"{prefix}.pe_b", np.zeros(hidden, dtype=np.float32))

    def __call__(self, tokens: Tensor, layout: Optional[tuple] = None) -> Tensor:
        h = ad.linear(tokens, self.w1, self.b1)
        if self.cond_pe:
            if layout is None:
                raise ContractError("conditional PE needs the token layout")
            parts, off = [], 0
            for _, (gh, gw) in layout:
                seg = ad.index(h, (slice(off, off + gh * gw), slice(None)))
                img = ad.reshape(ad.transpose(seg, (1, 0)), (self.hidden, gh, gw))
                img = ad.add(img, ad.conv2d(img, self.pe_w, self.pe_b, stride=1,
                                            padding=1, groups=self.hidden))
                parts.append(ad.transpose(ad.reshape(img, (self.hidden, gh * gw)),
                                          (1, 0)))
                off += gh * gw
            h = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return ad.linear(ad.gelu(h), self.w2, self.b2)

    def flops(self, length: int) -> int:
        total = 4 * length * self.channels * self.hidden
        if self.cond_pe:
            total += 2 * length * self.hidden * 9
        return total


class LayerNormParams:
    def __init__(self, store: ParamStore, prefix: str, channels: int):
        self.gamma = store.add(f"{prefix}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = store.add(f"{prefix}.beta", np.zeros(channels, dtype=np.float32))

    def __call__(self, tokens: Tensor) -> Tensor:
        return ad.layer_norm(tokens, self.gamma, self.beta)


# ---------------------------------------------------------------------------
# FRM / URM layers
# ---------------------------------------------------------------------------

class FrmLayer:
    """Feature relation modeling: pre-LN attention (SA within, CA across
    images) + residual, then pre-LN MLP + residual."""

    def __init__(self, store: ParamStore, prefix: str, rng, channels: int,
                 heads: int, mlp_ratio: float = 4.0, attn_mode: str = "VG",
                 sr_ratio: int = 1, cond_pe: bool = False, window: int = 8):
        self.ln1 = LayerNormParams(store, f"{prefix}.ln1", channels)
        self.attn = Attention(store, f"{prefix}.attn", rng, channels, heads,
                              mode=attn_mode, sr_ratio=sr_ratio, window=window)
        self.ln2 = LayerNormParams(store, f"{prefix}.ln2", channels)
        self.mlp = Mlp(store, f"{prefix}.mlp", rng, channels,
                       int(channels * mlp_ratio), cond_pe=cond_pe)

    def attention_update(self, z: TokenMap, x: TokenMap, mode: str):
        """Residual attention step only; returns updated token tensors."""
        if z.channels != x.channels:
            raise DimensionError("template/search channel mismatch")
        zn = z.with_tokens(self.ln1(z.tokens))
        xn = x.with_tokens(self.ln1(x.tokens))
        if mode == "SA":
            z_upd = self.attn(zn, zn)
            x_upd = self.attn(xn, xn)
        elif mode == "CA":
            if self.attn.mode in ("VL", "SL"):
                raise ConfigError("cross-attention is not defined for VL/SL")
            z_upd = self.attn(zn, xn)
            x_upd = self.attn(xn, zn)
        else:
            raise ConfigError(f"unknown FRM mode {mode}")
        return ad.add(z.tokens, z_upd), ad.add(x.tokens, x_upd)

    def __call__(self, z: TokenMap, x: TokenMap, mode: str):
        zt, xt = self.attention_update(z, x, mode)
        zt = ad.add(zt, self.mlp(self.ln2(zt), layout=z.layout()))
        xt = ad.add(xt, self.mlp(self.ln2(xt), layout=x.layout()))
        return z.with_tokens(zt), x.with_tokens(xt)

    def flops(self, lz: int, lx: int, mode: str) -> int:
        if mode == "SA":
            a = self.attn.flops(lz, lz) + self.attn.flops(lx, lx)
        else:
            a = self.attn.flops(lz, lx) + self.attn.flops(lx, lz)
        return a + self.mlp.flops(lz) + self.mlp.flops(lx)


class UrmLayer:
    """Unified relation modeling: one MHSA over the concatenated
    template(+dynamic)+search tokens, then the MLP, both pre-LN residual."""

    def __init__(self, store: ParamStore, prefix: str, rng, channels: int,
                 heads: int, mlp_ratio: float = 4.0, cond_pe: bool = False):
        self.ln1 = LayerNormParams(store, f"{prefix}.ln1", channels)
        self.attn = Attention(store, f"{prefix}.attn", rng, channels, heads,
                              mode="VG")
        self.ln2 = LayerNormParams(store, f"{prefix}.ln2", channels)
        self.mlp = Mlp(store, f"{prefix}.mlp", rng, channels,
                       int(channels * mlp_ratio), cond_pe=cond_pe)

    def attention_update(self, tm: TokenMap, bias_table=None,
                         mask: Optional[np.ndarray] = None) -> Tensor:
        if len(tm.segments) < 1:
            raise ContractError("URM needs segment metadata")
        normed = tm.with_tokens(self.ln1(tm.tokens))
        bias = None
        if bias_table is not None:
            bias = bias_table.bias(tm.layout(), tm.layout())
        upd = self.attn(normed, normed, bias=bias, mask=mask)
        return ad.add(tm.tokens, upd)

    def __call__(self, tm: TokenMap, bias_table=None,
                 mask: Optional[np.ndarray] = None) -> TokenMap:
        t = self.attention_update(tm, bias_table, mask)
        t = ad.add(t, self.mlp(self.ln2(t), layout=tm.layout()))
        return tm.with_tokens(t)

    def flops(self, length: int) -> int:
        c = self.attn.channels
        return 4 * c * c * length + 2 * c * length * length + self.mlp.flops(length)


def segment_mask(tm: TokenMap, keep: str) -> np.ndarray:
    """Additive attention mask restricting key visibility.

    keep="same": queries see only keys of their own segment;
    keep="cross": queries see only keys of other segments.
    """
    if keep not in ("same", "cross"):
        raise ContractError("keep must be 'same' or 'cross'")
    ids = np.concatenate([
        np.full(h * w, i) for i, (h, w) in enumerate(tm.grids)
    ])
    same = ids[:, None] == ids[None, :]
    allowed = same if keep == "same" else ~same
    mask = np.where(allowed, 0.0, -np.inf)
    return mask.astype(tm.tokens.data.dtype)


# ---------------------------------------------------------------------------
# local modeling layer (shallow stages)
# ---------------------------------------------------------------------------

class LocalLayer:
    """Shallow-stage block: depthwise 3x3 conv + channel MLP (pre-LN,
    residual), then a second pre-LN MLP residual.

    The conv uses replicate padding so a constant token field stays
    constant.
    """

    def __init__(self, store: ParamStore, prefix: str, rng, channels: int,
                 mlp_ratio: float = 3.0):
        self.channels = channels
        hidden = int(channels * mlp_ratio)
        self.ln1 = LayerNormParams(store, f"{prefix}.ln1", channels)
        self.dw_w = store.add(f"{prefix}.dw_w", glorot_normal(
            rng, (channels, 1, 3, 3), 9, 9))
        self.dw_b = store.add(f"{prefix}.dw_b", np.zeros(channels, dtype=np.float32))
        self.mlp1 = Mlp(store, f"{prefix}.mlp1", rng, channels, hidden)
        self.ln2 = LayerNormParams(store, f"{prefix}.ln2", channels)
        self.mlp2 = Mlp(store, f"{prefix}.mlp2", rng, channels, hidden)

    def __call__(self, tm: TokenMap) -> TokenMap:
        if not tm.is_single():
            raise ContractError("local layer operates on single-image maps")
        h, w = tm.grid
        c = self.channels
        normed = self.ln1(tm.tokens)
        img = ad.reshape(ad.transpose(normed, (1, 0)), (c, h, w))
        img = ad.conv2d(ad.pad_edge(img, 1), self.dw_w, self.dw_b, stride=1,
                        padding=0, groups=c)
        mixed = ad.transpose(ad.reshape(img, (c, h * w)), (1, 0))
        t = ad.add(tm.tokens, self.mlp1(mixed))
        t = ad.add(t, self.mlp2(self.ln2(t)))
        return tm.with_tokens(t)

    def flops(self, length: int) -> int:
        return (2 * length * self.channels * 9 + self.mlp1.flops(length)
                + self.mlp2.flops(length))


# ---------------------------------------------------------------------------
# Eq.-8 style decomposition oracle for cross-attention
# ---------------------------------------------------------------------------

def ca_dynamic_conv_oracle(z: TokenMap, x: TokenMap, frm: FrmLayer) -> np.ndarray:
    """Cross-attention for the search map computed as two template-generated
    dynamic linear maps with a softmax between and a residual, via naive
    per-position loops. Verification oracle for the vectorized CA path."""
    with ad.no_grad():
        zn = frm.ln1(z.tokens).data
        xn = frm.ln1(x.tokens).data
    a = frm.attn
    q = xn @ a.wq.data + a.bq.data
    k = zn @ a.wk.data + a.bk.data
    v = zn @ a.wv.data + a.bv.data
    lx, lz = xn.shape[0], zn.shape[0]
    nh, hd = a.heads, a.head_dim
    out = np.zeros((lx, a.channels), dtype=xn.dtype)
    for h in range(nh):
        sl = slice(h * hd, (h + 1) * hd)
        w1 = k[:, sl]  # first dynamic filter bank, generated by z
        w2 = v[:, sl]  # second dynamic filter bank, generated by z
        for n in range(lx):
            logits = np.empty(lz, dtype=xn.dtype)
            for m in range(lz):
                logits[m] = float(np.dot(w1[m], q[n, sl])) * a.scale
            e = np.exp(logits - logits.max())
            attn = e / e.sum()
            acc = np.zeros(hd, dtype=xn.dtype)
            for m in range(lz):
                acc += attn[m] * w2[m]
            out[n, sl] = acc
    return out @ a.wo.data + a.bo.data + x.tokens.data
