"""Parameter containers and transformer building blocks."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    dropout,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    softmax,
)


class Parameter(Tensor):
    """A leaf tensor that an optimizer is allowed to update in place."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=get_default_dtype()), requires_grad=True, name=name)


class Module:
    training = False
    _rng: np.random.Generator | None = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True, rng: np.random.Generator | None = None) -> "Module":
        self.training = mode
        self._rng = rng
        for _, child in self.children():
            child.train(mode, rng)
        return self

    def eval(self) -> "Module":
        return self.train(False, None)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(value.shape):
                raise ShapeError(f"load_state_dict[{name}]", p.shape, value.shape)
            p.data = np.array(value, dtype=p.dtype)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_in, d_out), bound))
        self.bias = Parameter(_uniform(rng, (d_out,), bound)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError("linear", x.shape, self.weight.shape)
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self._rng, self.training)


class MLP(Module):
    def __init__(self, d: int, mlp_ratio: float, drop: float, rng: np.random.Generator):
        hidden = max(1, int(round(d * mlp_ratio)))
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.drop = Dropout(drop)

    def forward(self, x: Tensor) -> Tensor:
        return self.drop(self.fc2(self.drop(gelu(self.fc1(x)))))


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns the attended values and the attention weights.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-1, -2)) * scale
    if bias is not None:
        scores = scores + bias
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


class MultiHeadAttention(Module):
    """Multi-head attention; queries and keys/values may come from different sets.

    ``rel_bias`` (optional) is added to the (heads, n_q, n_kv) score tensor.
    """

    def __init__(self, d: int, num_heads: int, drop: float, rng: np.random.Generator):
        if d % num_heads:
            raise ValueError(f"num_heads={num_heads} must divide d={d}")
        self.d, self.num_heads = d, num_heads
        self.q = Linear(d, d, rng)
        self.kv = Linear(d, 2 * d, rng)
        self.proj = Linear(d, d, rng)
        self.attn_drop = Dropout(drop)
        self.proj_drop = Dropout(drop)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor, parts: int) -> Tensor:
        # (..., n, parts*d) -> (parts, ..., heads, n, d_head)
        *lead, n, _ = x.shape
        nl = len(lead)
        x = x.reshape(*lead, n, parts, self.num_heads, self.d // self.num_heads)
        return x.permute(nl + 1, *range(nl), nl + 2, nl, nl + 3)

    def forward(self, x: Tensor, context: Tensor | None = None, rel_bias: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        q = self.q(x)
        *lead, n, _ = q.shape
        nl = len(lead)
        # (..., n, d) -> (..., heads, n, d_head)
        q = q.reshape(*lead, n, self.num_heads, self.d // self.num_heads).permute(*range(nl), nl + 1, nl, nl + 2)
        kv = self._split(self.kv(context), 2)
        scores = (q @ kv[0].transpose(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
        if rel_bias is not None:
            scores = scores + rel_bias
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = self.attn_drop(weights) @ kv[1]
        *lead, heads, n, dh = out.shape
        nl = len(lead)
        out = out.permute(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, heads * dh)
        return self.proj_drop(self.proj(out))


class RelativePositionBias(Module):
    """Learned additive attention bias indexed by 2-D offsets on a square token grid."""

    def __init__(self, side: int, num_heads: int, per_head: bool = False):
        self.side = side
        self.tables = num_heads if per_head else 1
        span = 2 * side - 1
        self.table = Parameter(np.zeros((self.tables, span, span)))
        rows, cols = np.divmod(np.arange(side * side), side)
        self.index_row = rows[:, None] - rows[None, :] + side - 1
        self.index_col = cols[:, None] - cols[None, :] + side - 1

    def forward(self) -> Tensor:
        # (tables, N, N); broadcast over heads when shared
        return self.table[:, self.index_row, self.index_col]


class TransformerBlock(Module):
    """Pre-norm self-attention block with an optional relative-position bias."""

    def __init__(
        self,
        d: int,
        num_heads: int,
        mlp_ratio: float,
        drop: float,
        rng: np.random.Generator,
        rel_pos: RelativePositionBias | None = None,
    ):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, num_heads, drop, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio, drop, rng)
        self.rel_pos = rel_pos

    def forward(self, x: Tensor) -> Tensor:
        bias = self.rel_pos() if self.rel_pos is not None else None
        x = x + self.attn(self.norm1(x), rel_bias=bias)
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm block where a query set attends to a fixed key/value set.

    Only the query stream is updated, so cost is linear in the key count.
    """

    def __init__(self, d: int, num_heads: int, mlp_ratio: float, drop: float, rng: np.random.Generator):
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, num_heads, drop, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio, drop, rng)

    def forward(self, query: Tensor, context: Tensor) -> Tensor:
        x = query + self.attn(self.norm_q(query), context=self.norm_kv(context))
        return x + self.mlp(self.norm2(x))
