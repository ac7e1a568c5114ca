"""Four-stage hierarchical transformer encoder with reduced-sequence attention.

Features come out at 1/4, 1/8, 1/16, and 1/32 of the input resolution and
there is no positional encoding: local position leaks in through the 3x3
depthwise convolution embedded in each feed-forward block, so the same
weights run on any input whose extents divide by 32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Binding, Conv2d, LayerNorm, Linear, ParamStore


@dataclass(frozen=True)
class StageConfig:
    patch_kernel: int
    patch_stride: int
    patch_pad: int
    embed_dim: int
    depth: int
    heads: int
    reduction: int
    mlp_ratio: int = 4

    def validate(self, field_prefix: str = "stage") -> None:
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"{field_prefix}.embed_dim={self.embed_dim} not divisible by "
                f"heads={self.heads}")
        if self.reduction < 1:
            raise ConfigError(f"{field_prefix}.reduction must be >= 1")
        for f in ("patch_kernel", "patch_stride", "embed_dim", "depth",
                  "heads", "mlp_ratio"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{field_prefix}.{f} must be positive")
        if self.patch_pad < 0:
            raise ConfigError(f"{field_prefix}.patch_pad must be >= 0")


def default_stages(dims=(32, 64, 160, 256), depths=(2, 2, 2, 2),
                   heads=(1, 2, 5, 8), reductions=(8, 4, 2, 1),
                   mlp_ratio: int = 4) -> tuple[StageConfig, ...]:
    """Reference small configuration: stage 1 embeds 7x7/s4/p3, later 3x3/s2/p1."""
    kernels = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))
    return tuple(
        StageConfig(k, s, p, d, dep, h, r, mlp_ratio)
        for (k, s, p), d, dep, h, r in zip(kernels, dims, depths, heads, reductions))


def _to_tokens(grid: T.Tensor) -> T.Tensor:
    c, h, w = grid.shape
    return T.transpose(T.reshape(grid, (c, h * w)), (1, 0))


def _to_grid(tokens: T.Tensor, h: int, w: int) -> T.Tensor:
    n, c = tokens.shape
    return T.reshape(T.transpose(tokens, (1, 0)), (c, h, w))


class OverlapPatchEmbed:
    """Strided conv embedding followed by layer norm over channels."""

    def __init__(self, store, rng, name, cin, cfg: StageConfig):
        self.cfg = cfg
        self.proj = Conv2d(store, rng, f"{name}.proj", cin, cfg.embed_dim,
                           cfg.patch_kernel, cfg.patch_stride, cfg.patch_pad)
        self.norm = LayerNorm(store, f"{name}.norm", cfg.embed_dim)

    def forward(self, x: T.Tensor, b: Binding) -> T.Tensor:
        y = self.proj.forward(x, b)
        c, h, w = y.shape
        return _to_grid(self.norm.forward(_to_tokens(y), b), h, w)


class EfficientSelfAttention:
    """Scaled dot-product attention with keys/values from a reduced token grid.

    With reduction r > 1 the key/value grid comes from a k=r, s=r convolution
    followed by layer norm (n/r^2 tokens); with r = 1 keys and values are the
    full token set and no reduction parameters exist.
    """

    def __init__(self, store, rng, name, dim, heads, reduction):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        if reduction < 1:
            raise ConfigError("reduction must be >= 1")
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.q = Linear(store, rng, f"{name}.q", dim, dim)
        self.k = Linear(store, rng, f"{name}.k", dim, dim)
        self.v = Linear(store, rng, f"{name}.v", dim, dim)
        self.proj = Linear(store, rng, f"{name}.proj", dim, dim)
        if reduction > 1:
            self.sr = Conv2d(store, rng, f"{name}.sr", dim, dim, reduction,
                             stride=reduction)
            self.sr_norm = LayerNorm(store, f"{name}.sr_norm", dim)
        self.last_weights = None  # debug capture, see forward()

    def forward(self, tokens: T.Tensor, h: int, w: int, b: Binding,
                capture_weights: bool = False) -> T.Tensor:
        n, c = tokens.shape
        heads, d = self.heads, self.dim // self.heads
        if self.reduction > 1:
            red = self.sr.forward(_to_grid(tokens, h, w), b)
            kv_tokens = self.sr_norm.forward(_to_tokens(red), b)
        else:
            kv_tokens = tokens
        m = kv_tokens.shape[0]

        def split_heads(t, length):
            return T.transpose(T.reshape(t, (length, heads, d)), (1, 0, 2))

        q = split_heads(self.q.forward(tokens, b), n)          # (h, n, d)
        k = split_heads(self.k.forward(kv_tokens, b), m)       # (h, m, d)
        v = split_heads(self.v.forward(kv_tokens, b), m)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        attn = T.softmax_lastdim(scores)                       # (h, n, m)
        if capture_weights:
            self.last_weights = attn.data.copy()
        ctx = T.matmul(attn, v)                                # (h, n, d)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, c))
        return self.proj.forward(merged, b)


class MixFfn:
    """Expand 1x1 -> 3x3 depthwise -> GELU -> project back; caller adds residual."""

    def __init__(self, store, rng, name, dim, ratio):
        hidden = dim * ratio
        self.fc1 = Linear(store, rng, f"{name}.fc1", dim, hidden)
        self.dw = Conv2d(store, rng, f"{name}.dw", hidden, hidden, 3, pad=1,
                         groups=hidden)
        self.fc2 = Linear(store, rng, f"{name}.fc2", hidden, dim)

    def forward(self, tokens: T.Tensor, h: int, w: int, b: Binding) -> T.Tensor:
        y = self.fc1.forward(tokens, b)
        y = _to_tokens(self.dw.forward(_to_grid(y, h, w), b))
        return self.fc2.forward(T.gelu(y), b)


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, store, rng, name, dim, heads, reduction, ratio):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = EfficientSelfAttention(store, rng, f"{name}.attn", dim,
                                           heads, reduction)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.ffn = MixFfn(store, rng, f"{name}.ffn", dim, ratio)

    def forward(self, tokens, h, w, b, capture_weights=False):
        tokens = T.add(tokens, self.attn.forward(
            self.norm1.forward(tokens, b), h, w, b, capture_weights))
        tokens = T.add(tokens, self.ffn.forward(
            self.norm2.forward(tokens, b), h, w, b))
        return tokens


class EncoderStage:
    def __init__(self, store, rng, name, cin, cfg: StageConfig):
        cfg.validate(name)
        self.cfg = cfg
        self.embed = OverlapPatchEmbed(store, rng, f"{name}.embed", cin, cfg)
        self.blocks = [
            TransformerBlock(store, rng, f"{name}.block{i}", cfg.embed_dim,
                             cfg.heads, cfg.reduction, cfg.mlp_ratio)
            for i in range(cfg.depth)
        ]
        self.norm = LayerNorm(store, f"{name}.norm", cfg.embed_dim)

    def forward(self, x: T.Tensor, b: Binding, capture_weights=False) -> T.Tensor:
        y = self.embed.forward(x, b)
        c, h, w = y.shape
        tokens = _to_tokens(y)
        for blk in self.blocks:
            tokens = blk.forward(tokens, h, w, b, capture_weights)
        return _to_grid(self.norm.forward(tokens, b), h, w)


class Encoder:
    """Stacked stages producing the four-level feature pyramid F1..F4."""

    def __init__(self, store: ParamStore, rng, stages: tuple[StageConfig, ...],
                 in_channels: int = 3, name: str = "encoder"):
        if len(stages) != 4:
            raise ConfigError("the encoder takes exactly four stage configs")
        self.stages = []
        cin = in_channels
        for i, cfg in enumerate(stages):
            self.stages.append(EncoderStage(store, rng, f"{name}.stage{i + 1}",
                                            cin, cfg))
            cin = cfg.embed_dim

    def encode(self, image: T.Tensor, b: Binding,
               capture_weights: bool = False) -> list[T.Tensor]:
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeError("encoder input must be a (3, H, W) tensor")
        _, h, w = image.shape
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(
                f"input extents ({h}, {w}) must divide by 32; pad first")
        feats = []
        x = image
        for stage in self.stages:
            x = stage.forward(x, b, capture_weights)
            feats.append(x)
        return feats
