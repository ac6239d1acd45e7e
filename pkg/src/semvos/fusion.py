"""Feature fusion: semantic prior injection, then deformable local fusion.

Stage one lets every pyramid texel cross-attend over the two global
tokens {CLS, GAP}, after a per-level projection to the shared channel
width. Stage two runs multi-scale deformable cross-attention: each
texel predicts a few fractional sampling offsets per head and level,
bilinearly samples value-projected maps there, and mixes the samples
with softmax weights. Offsets are predicted in texel units of each
level and divided by that level's size, so one learned displacement
means the same fraction of the map everywhere.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .config import EngineConfig
from .encoder import FeaturePyramid, SemanticTokens, multihead_attention
from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat, stack
from .weights import ModelWeights
from . import ops


def _to_tokens(level: Tensor) -> Tensor:
    c, h, w = level.shape
    return level.reshape(c, h * w).T


def _to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    return tokens.T.reshape(tokens.shape[1], h, w)


def reference_points(shapes: List[Tuple[int, int]]) -> np.ndarray:
    """Normalized texel-center anchors for every level, stacked [T, 2]."""
    refs = []
    for h, w in shapes:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rx = (xs.reshape(-1) + 0.5) / w
        ry = (ys.reshape(-1) + 0.5) / h
        refs.append(np.stack([rx, ry], axis=1))
    return np.concatenate(refs, axis=0)


def semantic_prior_fusion(pyramid: FeaturePyramid, tokens: SemanticTokens,
                          w: ModelWeights, cfg: EngineConfig, prefix: str = "fusion",
                          attn_sink: Optional[list] = None) -> FeaturePyramid:
    """Each texel (projected to C channels) attends over {CLS, GAP}."""
    c = cfg.channels
    if tokens.cls.shape != (c,):
        raise ConfigError(f"semantic token dim {tokens.cls.shape} != channels {c}")
    kv = stack([tokens.cls, tokens.gap], axis=0)
    out_levels = []
    for lvl, level in enumerate(pyramid.levels):
        cl, h, wd = level.shape
        pw = w[f"{prefix}.semantic.proj{lvl}.weight"]
        if pw.shape[0] != cl:
            raise ConfigError(f"level {lvl} projection expects {pw.shape[0]} channels, got {cl}")
        q = ops.linear(_to_tokens(level), pw, w[f"{prefix}.semantic.proj{lvl}.bias"])
        attended = multihead_attention(q, kv, w, f"{prefix}.semantic.attn", 1, attn_sink)
        normed = ops.layer_norm(q + attended, w[f"{prefix}.semantic.ln.gamma"],
                                w[f"{prefix}.semantic.ln.beta"])
        out_levels.append(_to_map(normed, h, wd))
    return FeaturePyramid(levels=out_levels, strides=pyramid.strides)


def ms_deform_attn(queries: Tensor, refs: np.ndarray, pyramid: FeaturePyramid,
                   w: ModelWeights, cfg: EngineConfig, prefix: str = "fusion",
                   attn_sink: Optional[list] = None) -> Tensor:
    """Deformable cross-attention of [T, C] queries over the pyramid.

    Offsets follow the convention of predicting texel-unit displacements
    per level that are normalized by that level's width/height before
    sampling; sampling positions map to pixels as x_norm * W - 0.5.
    """
    t, c = queries.shape
    heads, points = cfg.deform_heads, cfg.deform_points
    levels = len(pyramid.levels)
    if refs.shape != (t, 2):
        raise DimensionError(f"need one reference per query: {refs.shape} vs {t} queries")
    ch = c // heads

    value_maps = []
    for level in pyramid.levels:
        cl, h, wd = level.shape
        if cl != c:
            raise DimensionError(f"deformable stage expects {c}-channel levels, got {cl}")
        vt = ops.linear(_to_tokens(level), w[f"{prefix}.deform.value.weight"],
                        w[f"{prefix}.deform.value.bias"])
        value_maps.append(_to_map(vt, h, wd))

    offsets = ops.linear(queries, w[f"{prefix}.deform.offset.weight"],
                         w[f"{prefix}.deform.offset.bias"])
    offsets = offsets.reshape(t, heads, levels, points, 2)
    logits = ops.linear(queries, w[f"{prefix}.deform.weight.weight"],
                        w[f"{prefix}.deform.weight.bias"])
    probs = ops.softmax(logits.reshape(t, heads, levels * points), axis=-1)
    if attn_sink is not None:
        attn_sink.append(probs.data)

    rx = Tensor(refs[:, 0])
    ry = Tensor(refs[:, 1])
    head_outs = []
    for h_i in range(heads):
        acc = None
        for l_i, vmap in enumerate(value_maps):
            _, lh, lw = vmap.shape
            vhead = vmap[h_i * ch:(h_i + 1) * ch, :, :]
            for p_i in range(points):
                nx = rx + offsets[:, h_i, l_i, p_i, 0] * (1.0 / lw)
                ny = ry + offsets[:, h_i, l_i, p_i, 1] * (1.0 / lh)
                sample = ops.bilinear_sample_many(vhead, nx * lw - 0.5, ny * lh - 0.5)
                weighted = sample * probs[:, h_i, l_i * points + p_i].reshape(t, 1)
                acc = weighted if acc is None else acc + weighted
        head_outs.append(acc)
    merged = head_outs[0] if heads == 1 else concat(head_outs, axis=1)
    out = ops.linear(merged, w[f"{prefix}.deform.out.weight"], w[f"{prefix}.deform.out.bias"])
    return ops.layer_norm(queries + out, w[f"{prefix}.deform.ln.gamma"],
                          w[f"{prefix}.deform.ln.beta"])


def fuse(pyramid: FeaturePyramid, tokens: SemanticTokens, w: ModelWeights,
         cfg: EngineConfig, attn_sink: Optional[list] = None) -> FeaturePyramid:
    """Semantic prior fusion, then joint deformable fusion over all levels."""
    out = pyramid
    for d in range(cfg.fusion_depth):
        prefix = "fusion" if d == 0 else f"fusion{d}"
        out = semantic_prior_fusion(out, tokens, w, cfg, prefix, attn_sink)
        shapes = [(lv.shape[1], lv.shape[2]) for lv in out.levels]
        queries = concat([_to_tokens(lv) for lv in out.levels], axis=0)
        fusedq = ms_deform_attn(queries, reference_points(shapes), out, w, cfg,
                                prefix, attn_sink)
        levels, start = [], 0
        for h, wd in shapes:
            levels.append(_to_map(fusedq[start:start + h * wd, :], h, wd))
            start += h * wd
        out = FeaturePyramid(levels=levels, strides=pyramid.strides)
    return out
