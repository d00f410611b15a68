"""Transformer-style global fusion at the lowest (1/32) resolution.

Both branches are flattened to token sequences, concatenated, offset by a
learnable positional encoding and passed through pre-norm self-attention
layers.  The sequence is then split back into the two feature maps.
"""

from __future__ import annotations

import math

from . import tensor as T
from .nn import LayerNorm, Linear, ParamStore
from .tensor import Tensor


class AttentionLayerParams:
    def __init__(self, store: ParamStore, name: str, channels: int, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(store, f"{name}.ln1", channels)
        self.q = Linear(store, f"{name}.q", channels, channels)
        self.k = Linear(store, f"{name}.k", channels, channels)
        self.v = Linear(store, f"{name}.v", channels, channels)
        self.out = Linear(store, f"{name}.out", channels, channels)
        self.ln2 = LayerNorm(store, f"{name}.ln2", channels)
        self.mlp1 = Linear(store, f"{name}.mlp1", channels, channels * mlp_ratio)
        self.mlp2 = Linear(store, f"{name}.mlp2", channels * mlp_ratio, channels)


class FusionParams:
    def __init__(self, store: ParamStore, name: str, channels: int, tokens_per_branch: int,
                 layers: int, heads: int, mlp_ratio: int = 2):
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.heads = heads
        self.pos = store.new(f"{name}.pos", (2 * tokens_per_branch, channels), ("uniform", 0.01))
        self.layers = [AttentionLayerParams(store, f"{name}.l{i}", channels, mlp_ratio) for i in range(layers)]


def _heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return t.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def attention_layer(tokens: Tensor, lp: AttentionLayerParams, heads: int, return_weights: bool = False):
    """``X + MHA(LN(X))`` followed by ``+ MLP(LN(.))`` on a (batch, tokens, channels) tensor."""
    b, n, c = tokens.shape
    if c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")
    dk = c // heads
    h = lp.ln1(tokens)
    q, k, v = (_heads(proj(h), heads) for proj in (lp.q, lp.k, lp.v))
    scores = T.matmul(q, k.transpose(0, 1, 3, 2))
    weights = T.softmax_rows(scores, math.sqrt(dk))
    attended = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, c)
    mid = tokens + lp.out(attended)
    out = mid + lp.mlp2(T.mish(lp.mlp1(lp.ln2(mid))))
    if return_weights:
        return out, weights
    return out


def to_tokens(feat: Tensor) -> Tensor:
    b, c, h, w = feat.shape
    return feat.reshape(b, c, h * w).transpose(0, 2, 1)


def from_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


def global_fuse(color: Tensor, depth: Tensor, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Fuse the two lowest-resolution feature maps (both N x C x H x W)."""
    if color.shape != depth.shape:
        raise ValueError(f"global_fuse: color {color.shape} and depth {depth.shape} differ")
    b, c, h, w = color.shape
    n = h * w
    if 2 * n != params.pos.shape[0] or c != params.channels:
        raise ValueError(
            f"global_fuse: 2*H*W={2 * n} tokens of width {c} do not match positional encoding {params.pos.shape}"
        )
    seq = T.concat([to_tokens(color), to_tokens(depth)], axis=1) + params.pos
    for lp in params.layers:
        seq = attention_layer(seq, lp, params.heads)
    xi, xd = T.split(seq, [n, n], axis=1)
    return from_tokens(xi, h, w), from_tokens(xd, h, w)
