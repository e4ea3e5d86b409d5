"""Patch embedding, token assembly and the stack of TMoE transformer blocks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import BBox
from .config import ConfigError, ModelConfig
from .tensor import Tensor
from .tmoe import TMoEParams, init_tmoe, tmoe_forward

log = logging.getLogger(__name__)

LN_EPS = 1e-6


@dataclass
class Embeddings:
    patch_w: Tensor  # (3*M*M, d)
    patch_b: Tensor  # (d,)
    pe_ref: Tensor  # (N_T, d), one table shared by every reference frame
    pe_search: Tensor  # (N_X, d)
    te_fg: Tensor
    te_bg: Tensor
    te_search: Tensor
    state_token: Tensor  # (1, d)

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    q: TMoEParams
    k: TMoEParams
    v: TMoEParams
    o: TMoEParams
    ln2_g: Tensor
    ln2_b: Tensor
    fc1: TMoEParams
    fc2: TMoEParams

    def layers(self) -> dict[str, TMoEParams]:
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o, "fc1": self.fc1, "fc2": self.fc2}

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"ln1_g": self.ln1_g, "ln1_b": self.ln1_b, "ln2_g": self.ln2_g, "ln2_b": self.ln2_b}
        for lname, layer in self.layers().items():
            for tname, t in layer.named_tensors().items():
                out[f"{lname}.{tname}"] = t
        return out


@dataclass(frozen=True)
class TokenLayout:
    state: int
    refs: tuple[int, ...]
    search: int
    n_ref_tokens: int
    n_search_tokens: int

    @property
    def length(self) -> int:
        return self.search + self.n_search_tokens

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> TokenLayout:
        refs = tuple(1 + i * cfg.N_T for i in range(cfg.N))
        return cls(0, refs, 1 + cfg.N * cfg.N_T, cfg.N_T, cfg.N_X)


def sincos_2d(grid: int, d: int) -> np.ndarray:
    """(grid*grid, d) table: half the channels encode the row, half the column."""
    if d % 4:
        return np.zeros((grid * grid, d))
    quarter = d // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    pos = np.arange(grid, dtype=float)
    ang = pos[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (grid, d/2)
    rows = np.repeat(enc, grid, axis=0)
    cols = np.tile(enc, (grid, 1))
    return np.concatenate([rows, cols], axis=1)


def init_embeddings(cfg: ModelConfig, rng: np.random.Generator) -> Embeddings:
    d, dt = cfg.d, cfg.dtype
    fan_in = 3 * cfg.M * cfg.M
    bound = 1.0 / math.sqrt(fan_in)
    trainable_patch = not cfg.pretrained_backbone

    def emb(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dt)

    return Embeddings(
        patch_w=Tensor(rng.uniform(-bound, bound, (fan_in, d)), requires_grad=trainable_patch, dtype=dt),
        patch_b=Tensor(rng.uniform(-bound, bound, (d,)), requires_grad=trainable_patch, dtype=dt),
        pe_ref=Tensor(sincos_2d(cfg.ref_grid, d), requires_grad=True, dtype=dt),
        pe_search=Tensor(sincos_2d(cfg.search_grid, d), requires_grad=True, dtype=dt),
        te_fg=emb((d,)),
        te_bg=emb((d,)),
        te_search=emb((d,)),
        state_token=emb((1, d)),
    )


def init_block(cfg: ModelConfig, rng: np.random.Generator, variant: str = "tmoe") -> BlockParams:
    d, h, dt = cfg.d, cfg.hidden, cfg.dtype

    def layer(d_in, d_out):
        return init_tmoe(d_in, d_out, cfg.r, cfg.N_e, rng, dtype=dt, variant=variant)

    return BlockParams(
        ln1_g=Tensor(np.ones(d), dtype=dt),
        ln1_b=Tensor(np.zeros(d), dtype=dt),
        q=layer(d, d),
        k=layer(d, d),
        v=layer(d, d),
        o=layer(d, d),
        ln2_g=Tensor(np.ones(d), dtype=dt),
        ln2_b=Tensor(np.zeros(d), dtype=dt),
        fc1=layer(d, h),
        fc2=layer(h, d),
    )


# -- embedding ---------------------------------------------------------------


def image_to_patches(img: np.ndarray, M: int) -> np.ndarray:
    """(..., S, S, 3) -> (..., (S/M)^2, 3*M*M); each patch flattened row-major as (row, col, channel)."""
    *lead, S, S2, C = img.shape
    if S % M or S2 % M:
        raise ConfigError(f"image {S}x{S2} not divisible by patch size {M}")
    g, g2 = S // M, S2 // M
    x = img.reshape(*lead, g, M, g2, M, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, g * g2, M * M * C)


def patch_embed(img: np.ndarray, which: str, emb: Embeddings, cfg: ModelConfig) -> Tensor:
    """Project non-overlapping MxM patches of a (batched) image to tokens."""
    if which not in ("ref", "search"):
        raise ValueError(f"which must be 'ref' or 'search', got {which!r}")
    expected = cfg.ref_size if which == "ref" else cfg.search_size
    if img.shape[-3] != expected:
        log.debug("patch_embed: %s image side %d differs from configured %d", which, img.shape[-3], expected)
    patches = Tensor(image_to_patches(np.asarray(img), cfg.M), dtype=emb.patch_w.dtype)
    return patches @ emb.patch_w + emb.patch_b


def foreground_mask(bbox: BBox, size: int, M: int) -> np.ndarray:
    """Flattened (grid*grid,) mask of patches whose center lies in the half-open box."""
    clamped = bbox.clamp(size, size)
    if not np.allclose(clamped.as_tuple(), bbox.as_tuple(), atol=1e-6):
        log.warning("bbox %s extends outside %dx%d crop; clamped", bbox, size, size)
    g = size // M
    centers = (np.arange(g) + 0.5) * M
    inx = (centers >= clamped.x) & (centers < clamped.x + clamped.w)
    iny = (centers >= clamped.y) & (centers < clamped.y + clamped.h)
    return (iny[:, None] & inx[None, :]).reshape(-1)


def assemble_input(
    state_in: Tensor,
    refs: Sequence[tuple[Tensor, BBox | Sequence[BBox]]],
    search_tokens: Tensor,
    emb: Embeddings,
    cfg: ModelConfig,
) -> Tensor:
    """Concat(H, T_1..T_N, X) with positional and token-type embeddings added.

    ``refs`` holds (tokens, bbox-in-crop) per reference frame; for batched
    tokens the bbox entry is a sequence with one box per batch item.
    """
    if len(refs) != cfg.N:
        raise ValueError(f"expected {cfg.N} reference frames, got {len(refs)}")
    parts = [state_in]
    for tokens, boxes in refs:
        if isinstance(boxes, BBox):
            mask = foreground_mask(boxes, cfg.ref_size, cfg.M)
        else:
            mask = np.stack([foreground_mask(b, cfg.ref_size, cfg.M) for b in boxes])
        fg = Tensor(mask[..., None], dtype=tokens.dtype)
        type_emb = fg * emb.te_fg + (1.0 - fg) * emb.te_bg
        parts.append(tokens + emb.pe_ref + type_emb)
    parts.append(search_tokens + emb.pe_search + emb.te_search)
    axis = state_in.ndim - 2
    return T.concat(parts, axis=axis)


# -- blocks ------------------------------------------------------------------


def m2sa(tokens: Tensor, q: TMoEParams, k: TMoEParams, v: TMoEParams, o: TMoEParams, n_heads: int) -> Tensor:
    *lead, n, d = tokens.shape
    if d % n_heads:
        raise ConfigError(f"d={d} not divisible by {n_heads} heads")
    dh = d // n_heads
    nl = len(lead)

    def heads(x):
        x = x.reshape(*lead, n, n_heads, dh)
        return x.transpose(*range(nl), nl + 1, nl, nl + 2)

    qh, kh, vh = heads(tmoe_forward(tokens, q)), heads(tmoe_forward(tokens, k)), heads(tmoe_forward(tokens, v))
    att = T.softmax((qh @ kh.T) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = (att @ vh).transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, d)
    return tmoe_forward(ctx, o)


def mffn(tokens: Tensor, fc1: TMoEParams, fc2: TMoEParams) -> Tensor:
    return tmoe_forward(T.gelu(tmoe_forward(tokens, fc1)), fc2)


def block_forward(x: Tensor, blk: BlockParams, n_heads: int) -> Tensor:
    x = x + m2sa(T.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS), blk.q, blk.k, blk.v, blk.o, n_heads)
    return x + mffn(T.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS), blk.fc1, blk.fc2)


def encoder_forward(
    I: Tensor,
    blocks: Sequence[BlockParams],
    layout: TokenLayout,
    n_heads: int,
    final_norm: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, list[Tensor], Tensor]:
    """Run the blocks then split the output into (H', [T'_1..T'_N], X')."""
    if I.shape[-2] != layout.length:
        raise ValueError(f"sequence length {I.shape[-2]} != layout length {layout.length}")
    x = I
    for blk in blocks:
        x = block_forward(x, blk, n_heads)
    if final_norm is not None:
        x = T.layer_norm(x, final_norm[0], final_norm[1], LN_EPS)
    sizes = [1] + [layout.n_ref_tokens] * len(layout.refs) + [layout.n_search_tokens]
    pieces = T.split(x, sizes, axis=x.ndim - 2)
    return pieces[0], pieces[1:-1], pieces[-1]
