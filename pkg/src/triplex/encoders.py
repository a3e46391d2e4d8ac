"""Resolution-specific encoders: target, neighbor and global (with APEG)."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import FEATURE_DIM, NEIGHBOR_GRID, NEIGHBOR_TOKENS, TARGET_TOKENS, ToyExtractor
from .nn import Linear, Module, Parameter, RelativePositionBias, TransformerBlock
from .tensor import ShapeError, Tensor, depthwise_conv2d, gelu, relu, scatter_rows

ROLES = ("target", "neighbor", "global")


@dataclass
class EncoderConfig:
    """Architecture hyperparameters.

    Suffix 1 is the fusion layer, 2 the global encoder, 3 the neighbor
    encoder.  Defaults are the BC1 selections: depths 1/3/3, heads 4/16/16,
    MLP ratios 4/4/1, dropout 0.2/0.1/0.3.
    """

    d: int = 512
    d_in: int = FEATURE_DIM
    depth1: int = 1
    depth2: int = 3
    depth3: int = 3
    num_heads1: int = 4
    num_heads2: int = 16
    num_heads3: int = 16
    mlp_ratio1: float = 4.0
    mlp_ratio2: float = 4.0
    mlp_ratio3: float = 1.0
    dropout1: float = 0.2
    dropout2: float = 0.1
    dropout3: float = 0.3
    apeg_kernel: int = 3
    rel_bias_per_head: bool = False
    target_activation: str = "gelu"
    target_mode: str = "features"

    def __post_init__(self):
        for name in ("depth1", "depth2", "depth3"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("num_heads1", "num_heads2", "num_heads3"):
            h = getattr(self, name)
            if h < 1 or self.d % h:
                raise ValueError(f"{name}={h} must divide d={self.d}")
        if self.apeg_kernel < 1 or self.apeg_kernel % 2 == 0:
            raise ValueError("apeg_kernel must be a positive odd integer")
        if self.target_activation not in ("gelu", "relu", "none"):
            raise ValueError(f"unknown target_activation {self.target_activation!r}")
        if self.target_mode not in ("features", "image"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")

    @classmethod
    def from_dict(cls, values: dict) -> "EncoderConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown encoder options: {sorted(unknown)}")
        return cls(**values)


@dataclass
class TokenMatrix:
    tokens: Tensor
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        expected = {"target": TARGET_TOKENS, "neighbor": NEIGHBOR_TOKENS}.get(self.role)
        if expected is not None and self.tokens.shape[-2] != expected:
            raise ShapeError(f"TokenMatrix[{self.role}]", self.tokens.shape, (expected, self.d))
        if not np.all(np.isfinite(self.tokens.data)):
            raise FloatingPointError(f"{self.role} tokens contain non-finite values")

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]

    @property
    def k(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class GridCoordinates:
    """Integer (grid_x, grid_y) per token; grid extents are max + 1."""

    xy: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.int64).reshape(-1, 2)
        if self.xy.size and self.xy.min() < 0:
            raise ValueError("grid coordinates must be non-negative")
        if len({tuple(c) for c in self.xy.tolist()}) != len(self.xy):
            raise ValueError("duplicate grid coordinates")

    @property
    def h(self) -> int:
        return int(self.xy[:, 0].max()) + 1

    @property
    def w(self) -> int:
        return int(self.xy[:, 1].max()) + 1

    def flat_index(self) -> np.ndarray:
        return self.xy[:, 0] * self.w + self.xy[:, 1]


def _activation(name: str, x: Tensor) -> Tensor:
    if name == "gelu":
        return gelu(x)
    if name == "relu":
        return relu(x)
    return x


class TargetEncoder(Module):
    """Embeds the 49 target tokens of each spot.

    In ``features`` mode a trainable projection (plus activation) updates the
    precomputed 7x7x512 map; in ``image`` mode a trainable conv trunk first
    produces that map from the 224x224 patch.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.mode = cfg.target_mode
        self.activation = cfg.target_activation
        self.trunk = ToyExtractor(rng, out_dim=cfg.d_in) if self.mode == "image" else None
        self.proj = Linear(cfg.d_in, cfg.d, rng)
        self.d_in = cfg.d_in

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "image":
            if x.ndim != 4 or x.shape[1:] != (224, 224, 3):
                raise ShapeError("encode_target[image]", x.shape, (None, 224, 224, 3))
            fmap = self.trunk(x)
            x = fmap.reshape(fmap.shape[0], TARGET_TOKENS, fmap.shape[-1])
        elif x.shape[-2:] != (TARGET_TOKENS, self.d_in):
            raise ShapeError("encode_target", x.shape, (TARGET_TOKENS, self.d_in))
        return _activation(self.activation, self.proj(x))


class NeighborEncoder(Module):
    """Self-attention over the 5x5 neighbor tokens with learned relative-position bias."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.proj = Linear(cfg.d_in, cfg.d, rng)
        self.blocks = [
            TransformerBlock(
                cfg.d,
                cfg.num_heads3,
                cfg.mlp_ratio3,
                cfg.dropout3,
                rng,
                rel_pos=RelativePositionBias(NEIGHBOR_GRID, cfg.num_heads3, per_head=cfg.rel_bias_per_head),
            )
            for _ in range(cfg.depth3)
        ]
        self.d_in = cfg.d_in

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (NEIGHBOR_TOKENS, self.d_in):
            raise ShapeError("encode_neighbor", x.shape, (NEIGHBOR_TOKENS, self.d_in))
        x = self.proj(x)
        for blk in self.blocks:
            x = blk(x)
        return x


def apeg(tokens: Tensor, coords: GridCoordinates, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Positional encoding for tokens on an irregular grid.

    Tokens are scattered into a dense h x w x d grid (zeros at voids), convolved
    depthwise with ``weight`` (k, k, d), void cells are re-zeroed, occupied
    cells are gathered back in token order and added to the input.
    """
    n, d = tokens.shape
    if coords.xy.shape[0] != n:
        raise ShapeError("apeg", tokens.shape, coords.xy.shape, detail="one coordinate per token")
    h, w = coords.h, coords.w
    flat = coords.flat_index()
    grid = scatter_rows(tokens, flat, h * w).reshape(h, w, d)
    conv = depthwise_conv2d(grid, weight, bias)
    mask = np.zeros((h * w, 1), dtype=tokens.dtype)
    mask[flat] = 1.0
    conv = conv.reshape(h * w, d) * Tensor(mask)
    return tokens + conv.take(flat, axis=0)


class APEG(Module):
    def __init__(self, d: int, kernel: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(kernel * kernel)
        self.weight = Parameter(rng.uniform(-bound, bound, (kernel, kernel, d)))

    def forward(self, tokens: Tensor, coords: GridCoordinates) -> Tensor:
        return apeg(tokens, coords, self.weight)


class GlobalEncoder(Module):
    """Projection, one transformer block, APEG, then the remaining blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.proj = Linear(cfg.d_in, cfg.d, rng)
        self.blocks = [
            TransformerBlock(cfg.d, cfg.num_heads2, cfg.mlp_ratio2, cfg.dropout2, rng) for _ in range(cfg.depth2)
        ]
        self.apeg = APEG(cfg.d, cfg.apeg_kernel, rng)
        self.d_in = cfg.d_in

    def forward(self, x: Tensor, coords: GridCoordinates) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError("encode_global", x.shape, ("n", self.d_in))
        x = self.blocks[0](self.proj(x))
        x = self.apeg(x, coords)
        for blk in self.blocks[1:]:
            x = blk(x)
        return x


def encode_target(encoder: TargetEncoder, features) -> TokenMatrix:
    x = features if isinstance(features, Tensor) else Tensor(features)
    return TokenMatrix(encoder(x), "target")


def encode_neighbor(encoder: NeighborEncoder, features) -> TokenMatrix:
    x = features if isinstance(features, Tensor) else Tensor(features)
    return TokenMatrix(encoder(x), "neighbor")


def encode_global(encoder: GlobalEncoder, features, coords) -> TokenMatrix:
    x = features if isinstance(features, Tensor) else Tensor(features)
    if not isinstance(coords, GridCoordinates):
        coords = GridCoordinates(coords)
    return TokenMatrix(encoder(x, coords), "global")
