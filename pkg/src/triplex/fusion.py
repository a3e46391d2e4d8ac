"""Cross-attention fusion, prediction heads and the fusion loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import CrossAttentionBlock, Linear, Module
from .tensor import ShapeError, Tensor


@dataclass
class FusionOutput:
    """Fused vectors and the four head predictions (leading batch axis allowed)."""

    z_gt: Tensor
    z_gn: Tensor
    z_gtn: Tensor
    q_ta: Tensor | None = None
    q_ne: Tensor | None = None
    q_gl: Tensor | None = None
    q_f: Tensor | None = None


@dataclass
class LossBreakdown:
    L_ta: Tensor
    L_ne: Tensor
    L_gl: Tensor
    L_f: Tensor
    alpha: float
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "L_Ta": float(self.L_ta.data),
            "L_Ne": float(self.L_ne.data),
            "L_Gl": float(self.L_gl.data),
            "L_F": float(self.L_f.data),
            "total": float(self.total.data),
        }


class CrossAttentionStack(Module):
    def __init__(self, d: int, depth: int, num_heads: int, mlp_ratio: float, drop: float, rng: np.random.Generator):
        self.blocks = [CrossAttentionBlock(d, num_heads, mlp_ratio, drop, rng) for _ in range(depth)]

    def forward(self, query: Tensor, context: Tensor) -> Tensor:
        x = query
        for blk in self.blocks:
            x = blk(x, context)
        return x


class FusionLayer(Module):
    """The global token queries target and neighbor tokens in two separate stacks.

    Target and neighbor tokens never attend to each other; per spot the cost is
    linear in 49 + 25 keys.
    """

    def __init__(self, d: int, depth: int, num_heads: int, mlp_ratio: float, drop: float, rng: np.random.Generator):
        self.target_stack = CrossAttentionStack(d, depth, num_heads, mlp_ratio, drop, rng)
        self.neighbor_stack = CrossAttentionStack(d, depth, num_heads, mlp_ratio, drop, rng)
        self.d = d

    def forward(self, z_gl: Tensor, z_ta: Tensor, z_ne: Tensor) -> FusionOutput:
        if z_gl.shape[-1] != self.d or z_ta.shape[-1] != self.d or z_ne.shape[-1] != self.d:
            raise ShapeError("cross_attention_fuse", z_gl.shape, z_ta.shape, z_ne.shape)
        if z_ta.shape[:-2] != z_gl.shape[:-1] or z_ne.shape[:-2] != z_gl.shape[:-1]:
            raise ShapeError("cross_attention_fuse", z_gl.shape, z_ta.shape, z_ne.shape, detail="batch axes differ")
        lead = z_gl.shape[:-1]
        query = z_gl.reshape(*lead, 1, self.d)
        z_gt = self.target_stack(query, z_ta).reshape(*lead, self.d)
        z_gn = self.neighbor_stack(query, z_ne).reshape(*lead, self.d)
        return FusionOutput(z_gt=z_gt, z_gn=z_gn, z_gtn=z_gt + z_gn)


class PredictionHeads(Module):
    """Four independent fully connected heads; target/neighbor tokens are mean-pooled first."""

    def __init__(self, d: int, m: int, rng: np.random.Generator):
        self.target = Linear(d, m, rng)
        self.neighbor = Linear(d, m, rng)
        self.global_ = Linear(d, m, rng)
        self.fusion = Linear(d, m, rng)
        self.m = m

    def forward(self, z_ta: Tensor, z_ne: Tensor, z_gl: Tensor, z_gtn: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (
            self.target(z_ta.mean(axis=-2)),
            self.neighbor(z_ne.mean(axis=-2)),
            self.global_(z_gl),
            self.fusion(z_gtn),
        )


def fusion_loss(q_ta: Tensor, q_ne: Tensor, q_gl: Tensor, q_f: Tensor, y, alpha: float, detach_soft_target: bool = True) -> LossBreakdown:
    """Per-head losses blending ground truth and the fusion head's soft target.

    For each of the target, neighbor and global heads::

        L_j = (1 - alpha) * mean((q_j - y)^2) + alpha * mean((q_j - q_f)^2)

    plus ``L_f = mean((q_f - y)^2)``; ``total`` is their sum.  Means run over
    genes and over any leading batch axis.  The soft target is detached by
    default so the fusion head is driven only by ``L_f``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=q_f.dtype))
    for name, q in (("q_ta", q_ta), ("q_ne", q_ne), ("q_gl", q_gl), ("q_f", q_f)):
        if q.shape != y.shape:
            raise ShapeError(f"fusion_loss[{name}]", q.shape, y.shape)
    soft = q_f.detach() if detach_soft_target else q_f

    def sq(a: Tensor, b: Tensor) -> Tensor:
        diff = a - b
        return (diff * diff).mean()

    def head(q: Tensor) -> Tensor:
        return sq(q, y) * (1.0 - alpha) + sq(q, soft) * alpha

    L_ta, L_ne, L_gl = head(q_ta), head(q_ne), head(q_gl)
    L_f = sq(q_f, y)
    total = L_ta + L_ne + L_gl + L_f
    return LossBreakdown(L_ta, L_ne, L_gl, L_f, alpha, total)
