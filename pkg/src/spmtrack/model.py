"""Full tracker network: embeddings, TMoE encoder and prediction head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .boxes import BBox
from .config import ModelConfig
from .encoder import (
    BlockParams,
    Embeddings,
    TokenLayout,
    assemble_input,
    encoder_forward,
    init_block,
    init_embeddings,
    patch_embed,
)
from .head import HeadParams, head_forward, init_head
from .tensor import Tensor


@dataclass
class ForwardOutput:
    score: Tensor  # (B, g, g)
    boxes: Tensor  # (B, g, g, 4)
    state: Tensor  # H', (B, 1, d)
    search_tokens: Tensor  # X', (B, N_X, d)


class SPMTrack:
    def __init__(self, cfg: ModelConfig, variant: str = "tmoe", seed: int = 0):
        if variant == "conventional_moe":
            raise ValueError("conventional_moe is a parameter-count variant only")
        self.cfg = cfg
        self.variant = variant
        self.layout = TokenLayout.from_config(cfg)
        rng = np.random.default_rng(seed)
        self.emb: Embeddings = init_embeddings(cfg, rng)
        self.blocks: list[BlockParams] = [init_block(cfg, rng, variant) for _ in range(cfg.L)]
        self.norm_g = Tensor(np.ones(cfg.d), dtype=cfg.dtype)
        self.norm_b = Tensor(np.zeros(cfg.d), dtype=cfg.dtype)
        self.head: HeadParams = init_head(cfg.d, cfg.N_X, rng, cfg.dtype)

    # -- parameters -----------------------------------------------------------
    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"emb.{k}": v for k, v in self.emb.named_tensors().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.named_tensors().items()})
        out["norm_g"] = self.norm_g
        out["norm_b"] = self.norm_b
        out.update({f"head.{k}": v for k, v in self.head.named_tensors().items()})
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def frozen_params(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if not t.requires_grad}

    def num_params(self) -> tuple[int, int]:
        tensors = self.named_tensors().values()
        return sum(t.data.size for t in tensors), sum(t.data.size for t in tensors if t.requires_grad)

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def load_backbone(self, weights: Mapping[str, np.ndarray]) -> None:
        """Import pretrained linear/norm weights into shared experts and norms.

        Keys follow ``named_tensors`` (e.g. ``blocks.0.q.shared_w``); only
        frozen backbone slots and the patch projection are accepted. Loaded
        patch projections become frozen. Converting external checkpoints to
        this naming is the caller's job.
        """
        named = self.named_tensors()
        for key, value in weights.items():
            if key not in named:
                raise KeyError(f"unknown tensor {key!r}")
            if not (key.endswith(("shared_w", "shared_b")) or key.startswith("emb.patch_")
                    or "ln" in key.rsplit(".", 1)[-1] or key.startswith("norm_")):
                raise KeyError(f"{key!r} is not a backbone tensor")
            t = named[key]
            arr = np.asarray(value, dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"{key}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr)
            if key.startswith("emb.patch_"):
                t.requires_grad = False
                t.grad = None

    # -- forward ----------------------------------------------------------------
    def state_input(self, carried: Tensor | None, batch: int) -> Tensor:
        """Learnable H, plus the previous frame's H' when one is carried."""
        zero = Tensor(np.zeros((batch, 1, self.cfg.d)), dtype=self.cfg.dtype)
        base = self.emb.state_token + zero
        return base if carried is None else base + carried

    def forward(
        self,
        ref_imgs: np.ndarray,
        ref_boxes: Sequence[Sequence[BBox]],
        search_img: np.ndarray,
        carried: Tensor | None = None,
    ) -> ForwardOutput:
        """Batched forward.

        ref_imgs: (B, N, S_ref, S_ref, 3); ref_boxes: B lists of N crop-space boxes;
        search_img: (B, S_search, S_search, 3); carried: H' of the previous frame.
        """
        cfg = self.cfg
        B = search_img.shape[0]
        if ref_imgs.shape[:2] != (B, cfg.N):
            raise ValueError(f"ref_imgs shape {ref_imgs.shape} does not match batch {B} x N={cfg.N}")
        I = self.assemble(ref_imgs, ref_boxes, search_img, carried)
        Hp, _, Xp = encoder_forward(I, self.blocks, self.layout, cfg.N_h, (self.norm_g, self.norm_b))
        score, boxes = head_forward(Hp, Xp, self.head)
        return ForwardOutput(score, boxes, Hp, Xp)

    def assemble(self, ref_imgs, ref_boxes, search_img, carried=None) -> Tensor:
        cfg = self.cfg
        B = search_img.shape[0]
        refs = []
        for i in range(cfg.N):
            tokens = patch_embed(ref_imgs[:, i], "ref", self.emb, cfg)
            refs.append((tokens, [ref_boxes[b][i] for b in range(B)]))
        search = patch_embed(search_img, "search", self.emb, cfg)
        return assemble_input(self.state_input(carried, B), refs, search, self.emb, cfg)
