"""Dense mixture-of-experts replacement for a linear layer.

A layer mapping ``d -> D`` holds a frozen shared expert (the pretrained linear
map), a router producing softmax weights over ``N_e`` routed experts, one
compression expert ``d -> r`` shared by all routed experts, and ``N_e`` routed
experts ``r -> D``. Every routed expert contributes on every token.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import VARIANTS, ModelConfig
from .tensor import ShapeError, Tensor


@dataclass
class TMoEParams:
    shared_w: Tensor
    shared_b: Tensor
    router_w: Tensor | None
    router_b: Tensor | None
    compress_w: Tensor
    routed_w: list[Tensor]
    # per_expert_compression stores N_e compression experts side by side: (d, N_e*r)
    variant: str = "tmoe"

    @property
    def d_in(self) -> int:
        return self.shared_w.shape[0]

    @property
    def d_out(self) -> int:
        return self.shared_w.shape[1]

    @property
    def n_experts(self) -> int:
        return len(self.routed_w)

    @property
    def rank(self) -> int:
        return self.routed_w[0].shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"shared_w": self.shared_w, "shared_b": self.shared_b}
        if self.router_w is not None:
            out["router_w"] = self.router_w
            out["router_b"] = self.router_b
        out["compress_w"] = self.compress_w
        for i, w in enumerate(self.routed_w):
            out[f"routed_w.{i}"] = w
        return out

    def trainable_params(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]


def init_tmoe(
    d_in: int,
    d_out: int,
    r: int,
    n_experts: int,
    rng: np.random.Generator,
    dtype="f32",
    shared_w: np.ndarray | None = None,
    shared_b: np.ndarray | None = None,
    variant: str = "tmoe",
) -> TMoEParams:
    """Fresh layer with zero routed experts, so it starts equal to its shared expert.

    Without pretrained weights the shared expert is drawn like a default
    linear layer, U(+-1/sqrt(d_in)), and is frozen.
    """
    if variant not in ("tmoe", "per_expert_compression", "lora_baseline"):
        raise ValueError(f"variant {variant!r} has no per-linear layer form")
    if variant == "lora_baseline":
        n_experts = 1
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError(f"need 1 <= r <= min(d_in, d_out), got r={r}, d_in={d_in}, d_out={d_out}")
    bound = 1.0 / np.sqrt(d_in)
    if shared_w is None:
        shared_w = rng.uniform(-bound, bound, size=(d_in, d_out))
    if shared_b is None:
        shared_b = rng.uniform(-bound, bound, size=(d_out,))
    if shared_w.shape != (d_in, d_out) or shared_b.shape != (d_out,):
        raise ShapeError(f"shared expert shapes {shared_w.shape}, {shared_b.shape} != ({d_in}, {d_out})")
    n_compress = n_experts if variant == "per_expert_compression" else 1
    router_w = router_b = None
    if variant != "lora_baseline":
        router_w = Tensor(rng.normal(0.0, 0.02, size=(d_in, n_experts)), requires_grad=True, dtype=dtype)
        router_b = Tensor(np.zeros(n_experts), requires_grad=True, dtype=dtype)
    params = TMoEParams(
        shared_w=Tensor(shared_w, dtype=dtype),
        shared_b=Tensor(shared_b, dtype=dtype),
        router_w=router_w,
        router_b=router_b,
        compress_w=Tensor(rng.uniform(-bound, bound, size=(d_in, n_compress * r)), requires_grad=True, dtype=dtype),
        routed_w=[Tensor(np.zeros((r, d_out)), requires_grad=True, dtype=dtype) for _ in range(n_experts)],
        variant=variant,
    )
    freeze_shared(params)
    return params


def freeze_shared(params: TMoEParams) -> None:
    params.shared_w.requires_grad = False
    params.shared_b.requires_grad = False
    params.shared_w.grad = None
    params.shared_b.grad = None
    for t in params.named_tensors().values():
        if t is not params.shared_w and t is not params.shared_b:
            t.requires_grad = True


def router_weights(x: Tensor, params: TMoEParams) -> Tensor:
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"router: input {x.shape} vs router {params.router_w.shape}")
    return T.softmax(x @ params.router_w + params.router_b, axis=-1)


def shared_forward(x: Tensor, params: TMoEParams) -> Tensor:
    return x @ params.shared_w + params.shared_b


def tmoe_forward(x: Tensor, params: TMoEParams) -> Tensor:
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"tmoe: input {x.shape} vs shared expert {params.shared_w.shape}")
    y = shared_forward(x, params)
    yc = x @ params.compress_w
    if params.variant == "lora_baseline":
        return y + yc @ params.routed_w[0]
    w = router_weights(x, params)
    n_e, r = params.n_experts, params.rank
    gates = T.split(w, [1] * n_e, axis=-1)
    if params.variant == "per_expert_compression":
        inputs = T.split(yc, [r] * n_e, axis=-1)
    else:
        inputs = [yc] * n_e
    for gate, xi, wi in zip(gates, inputs, params.routed_w):
        y = y + gate * (xi @ wi)
    return y


# -- parameter accounting ------------------------------------------------------


@dataclass
class ParamReport:
    variant: str
    modules: dict[str, tuple[int, int]] = field(default_factory=dict)

    def add(self, module: str, total: int, trainable: int) -> None:
        t0, r0 = self.modules.get(module, (0, 0))
        self.modules[module] = (t0 + total, r0 + trainable)

    @property
    def total(self) -> int:
        return sum(t for t, _ in self.modules.values())

    @property
    def trainable(self) -> int:
        return sum(r for _, r in self.modules.values())

    def format(self) -> str:
        lines = [f"variant,{self.variant}", "module,total,trainable"]
        for name, (t, r) in self.modules.items():
            lines.append(f"{name},{t},{r}")
        lines.append(f"all,{self.total},{self.trainable}")
        lines.append(f"total_M,{self.total / 1e6:.3f}")
        lines.append(f"trainable_M,{self.trainable / 1e6:.3f}")
        return "\n".join(lines)


def linear_trainable_count(d_in: int, d_out: int, r: int, n_e: int, variant: str) -> int:
    """Trainable parameters added on top of one frozen ``d_in -> d_out`` linear layer."""
    if variant == "tmoe":
        return d_in * n_e + n_e + d_in * r + n_e * r * d_out
    if variant == "per_expert_compression":
        return d_in * n_e + n_e + n_e * d_in * r + n_e * r * d_out
    if variant in ("lora_baseline", "conventional_moe"):
        return d_in * r + r * d_out
    raise ValueError(f"unknown variant {variant!r}")


def count_params(cfg: ModelConfig, variant: str = "tmoe") -> ParamReport:
    """Closed-form total/trainable counts; no tensors are allocated."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    d, h, r, n_e = cfg.d, cfg.hidden, cfg.r, cfg.N_e
    rep = ParamReport(variant)

    patch = 3 * cfg.M**2 * d + d
    rep.add("patch_embed", patch, 0 if cfg.pretrained_backbone else patch)
    emb = (cfg.N_T + cfg.N_X) * d + 3 * d + d
    rep.add("embeddings", emb, emb)

    def linear(name, d_in, d_out, adapt):
        rep.add(name + ".shared", d_in * d_out + d_out, 0)
        extra = linear_trainable_count(d_in, d_out, r, n_e, adapt)
        rep.add(name + ".experts", extra, extra)

    for _ in range(cfg.L):
        rep.add("blocks.norm", 4 * d, 0)
        for _proj in "qkvo":
            linear("blocks.attn", d, d, variant)
        if variant == "conventional_moe":
            ffn = d * h + h + h * d + d
            rep.add("blocks.ffn.shared", ffn, 0)
            routed = n_e * ffn + d * n_e + n_e
            rep.add("blocks.ffn.experts", routed, routed)
        else:
            linear("blocks.ffn", d, h, variant)
            linear("blocks.ffn", h, d, variant)
    rep.add("final_norm", 2 * d, 0)
    head = 2 * (2 * (d * d + d)) + (d + 1) + (4 * d + 4)
    rep.add("head", head, head)
    return rep
