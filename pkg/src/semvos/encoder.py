"""Frame encoders: a small ViT producing semantic tokens and a strided
CNN producing a three-level feature pyramid.

The ViT contributes the CLS token (a learned global summary) and the
GAP token (mean of the final patch tokens); the fusion block later
injects both into the pyramid. Positional embeddings are stored on the
base patch grid and bilinearly resized for other input sizes, so one
weight set serves every scale variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .config import EngineConfig
from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat
from .weights import ModelWeights
from . import ops

PYRAMID_STRIDES = (4, 8, 16)


@dataclass
class SemanticTokens:
    cls: Tensor          # [C]
    gap: Tensor          # [C]
    patches: Tensor      # [N, C]
    grid: Tuple[int, int]


@dataclass
class FeaturePyramid:
    levels: List[Tensor]  # [C_l, H_l, W_l] per level
    strides: Tuple[int, ...] = PYRAMID_STRIDES


def multihead_attention(q_in: Tensor, kv_in: Tensor, w: ModelWeights, prefix: str,
                        heads: int, attn_sink: Optional[list] = None) -> Tensor:
    """Standard multi-head attention of q_in rows over kv_in rows.

    ``attn_sink``, when given, collects every head's probability matrix
    so tests can assert normalization.
    """
    c = q_in.shape[1]
    if c % heads:
        raise ConfigError(f"channel dim {c} not divisible by {heads} heads")
    q = ops.linear(q_in, w[prefix + ".wq"], w[prefix + ".bq"])
    k = ops.linear(kv_in, w[prefix + ".wk"], w[prefix + ".bk"])
    v = ops.linear(kv_in, w[prefix + ".wv"], w[prefix + ".bv"])
    ch = c // heads
    scale = 1.0 / math.sqrt(ch)
    outs = []
    for h in range(heads):
        sl = slice(h * ch, (h + 1) * ch)
        logits = ops.matmul(q[:, sl], k[:, sl].T) * scale
        probs = ops.softmax(logits, axis=-1)
        if attn_sink is not None:
            attn_sink.append(probs.data)
        outs.append(ops.matmul(probs, v[:, sl]))
    merged = outs[0] if heads == 1 else concat(outs, axis=1)
    return ops.linear(merged, w[prefix + ".wo"], w[prefix + ".bo"])


def patch_embed(image: Tensor, patch: int, w: ModelWeights) -> Tensor:
    """Tokenize a [3, H, W] image into row-major [N, C] patch embeddings."""
    _, h, wd = image.shape
    if h % patch or wd % patch:
        raise ConfigError(f"image {h}x{wd} not divisible by patch size {patch}")
    hp, wp = h // patch, wd // patch
    blocks = image.reshape(3, hp, patch, wp, patch)
    flat = blocks.transpose(1, 3, 0, 2, 4).reshape(hp * wp, 3 * patch * patch)
    return ops.linear(flat, w["encoder.vit.patch_embed.weight"],
                      w["encoder.vit.patch_embed.bias"])


def positional_embedding(w: ModelWeights, grid: Tuple[int, int]) -> Tensor:
    """Positional table resized to the requested patch grid, as [N, C]."""
    pos = w["encoder.vit.pos"]
    hp, wp = grid
    if pos.shape[1:] != (hp, wp):
        pos = ops.resize_bilinear(pos, hp, wp)
    return pos.transpose(1, 2, 0).reshape(hp * wp, pos.shape[0])


def vit_forward(tokens: Tensor, w: ModelWeights, cfg: EngineConfig,
                grid: Tuple[int, int], attn_sink: Optional[list] = None,
                pos: Optional[Tensor] = None) -> SemanticTokens:
    """Run pre-norm transformer blocks over [CLS; patches + positions]."""
    n, c = tokens.shape
    if grid[0] * grid[1] != n:
        raise DimensionError(f"grid {grid} does not cover {n} tokens")
    if pos is None:
        pos = positional_embedding(w, grid)
    x = concat([w["encoder.vit.cls"].reshape(1, c), tokens + pos], axis=0)
    for i in range(cfg.vit_blocks):
        p = f"encoder.vit.block{i}"
        normed = ops.layer_norm(x, w[p + ".ln1.gamma"], w[p + ".ln1.beta"])
        x = x + multihead_attention(normed, normed, w, p + ".attn",
                                    cfg.vit_heads, attn_sink)
        normed = ops.layer_norm(x, w[p + ".ln2.gamma"], w[p + ".ln2.beta"])
        hidden = ops.linear(normed, w[p + ".mlp.w1"], w[p + ".mlp.b1"]).relu()
        x = x + ops.linear(hidden, w[p + ".mlp.w2"], w[p + ".mlp.b2"])
    x = ops.layer_norm(x, w["encoder.vit.ln_final.gamma"], w["encoder.vit.ln_final.beta"])
    patches = x[1:, :]
    return SemanticTokens(cls=x[0, :], gap=ops.global_avg_pool(patches),
                          patches=patches, grid=grid)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer norm over channels independently at each spatial location.

    No spatial pooling, so convolution shift-equivariance is preserved
    exactly, and a zero map stays zero.
    """
    c, h, wd = x.shape
    flat = x.transpose(1, 2, 0).reshape(h * wd, c)
    normed = ops.layer_norm(flat, gamma, beta)
    return normed.reshape(h, wd, c).transpose(2, 0, 1)


def cnn_pyramid(image: Tensor, w: ModelWeights, cfg: EngineConfig) -> FeaturePyramid:
    """Four stride-2 conv stages (conv, channel norm, relu); taps after
    the /4, /8, /16 stages.

    The norm keeps activations at unit scale through the chain; bare
    small-init convolutions would shrink the map geometrically and leave
    the fusion block a signal far weaker than its own bias terms.
    """
    _, h, wd = image.shape
    if h < 16 or wd < 16:
        raise ConfigError(f"pyramid needs at least 16x16 input, got {h}x{wd}")
    x = image
    levels = []
    for i in range(4):
        x = ops.conv2d(x, w[f"encoder.pyramid.conv{i}.weight"],
                       w[f"encoder.pyramid.conv{i}.bias"], stride=2, padding=1)
        x = channel_norm(x, w[f"encoder.pyramid.conv{i}.ln.gamma"],
                         w[f"encoder.pyramid.conv{i}.ln.beta"]).relu()
        if i >= 1:
            levels.append(x)
    return FeaturePyramid(levels=levels)


def encode_frame(image: Tensor, w: ModelWeights, cfg: EngineConfig,
                 attn_sink: Optional[list] = None) -> Tuple[SemanticTokens, FeaturePyramid]:
    _, h, wd = image.shape
    tokens = patch_embed(image, cfg.patch, w)
    sem = vit_forward(tokens, w, cfg, (h // cfg.patch, wd // cfg.patch), attn_sink)
    return sem, cnn_pyramid(image, w, cfg)
