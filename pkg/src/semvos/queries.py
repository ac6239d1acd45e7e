"""Per-object target queries and their discriminative update.

A query set is M vectors carrying one object's identity across frames.
Each frame they pass through a small transformer (cross-attention over
the stride-4 fused features, then self-attention) that also emits a
per-pixel readout map for the decoder. On memory-update frames, each
query additionally picks the single most cosine-similar feature
location and folds that salient feature back in through one
cross-attention step with a residual - an additive update driven by
the best match only, not the whole object region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .config import EngineConfig
from .encoder import FeaturePyramid, multihead_attention
from .errors import DimensionError
from .tensor import Tensor, concat, stack
from .weights import ModelWeights
from . import ops

IDENTITY_LN = None  # lazy pair of constant gamma/beta tensors


@dataclass
class TargetQuerySet:
    object_id: int
    queries: Tensor  # [M, C]
    last_update_frame: int = 0


def _identity_ln(c: int):
    global IDENTITY_LN
    if IDENTITY_LN is None or IDENTITY_LN[0].shape[0] != c:
        IDENTITY_LN = (Tensor(np.ones(c)), Tensor(np.zeros(c)))
    return IDENTITY_LN


def init_query_set(object_id: int, fused_s4: Tensor, mask_s4: np.ndarray,
                   w: ModelWeights, cfg: EngineConfig) -> TargetQuerySet:
    """Build M queries from masked pooling of stride-4 features.

    The pooled object descriptor is tiled to M slots, learned per-slot
    embeddings are added, and the result is normalized once so later
    residual-plus-norm updates cannot change the norm scale regime.
    An empty mask (object invisible at this scale) falls back to plain
    global pooling.
    """
    c, h, wd = fused_s4.shape
    if mask_s4.shape != (h, wd):
        raise DimensionError(f"mask {mask_s4.shape} does not match features {fused_s4.shape}")
    weights = mask_s4.reshape(-1)
    total = float(weights.sum())
    tokens = fused_s4.reshape(c, h * wd).T
    if total > 0:
        pooled = (tokens * Tensor(weights.reshape(-1, 1))).sum(axis=0) * (1.0 / total)
    else:
        pooled = ops.global_avg_pool(tokens)
    tiled = pooled.reshape(1, c) + w["queries.slot"]
    gamma, beta = _identity_ln(c)
    return TargetQuerySet(object_id=object_id,
                          queries=ops.layer_norm(tiled, gamma, beta),
                          last_update_frame=0)


def correlate(query: Tensor, feat: Tensor) -> Tensor:
    """Cosine similarity of one query against every spatial feature."""
    c = query.shape[0]
    if feat.shape[0] != c:
        raise DimensionError(f"channel mismatch: query {query.shape} vs features {feat.shape}")
    _, h, w = feat.shape
    cols = feat.data.reshape(c, h * w)
    qn = float(np.sqrt((query.data ** 2).sum()))
    norms = np.sqrt((cols ** 2).sum(axis=0))
    denom = qn * norms
    sims = np.zeros(h * w)
    ok = denom > 0
    sims[ok] = (query.data @ cols[:, ok]) / denom[ok]
    return Tensor(sims.reshape(h, w))


def discriminative_select(query: Tensor, feat: Tensor) -> Tuple[Tuple[int, int], Tensor]:
    """Location and feature of the best cosine match; ties pick the
    lowest row-major index."""
    sims = correlate(query, feat).data
    flat = int(np.argmax(sims))
    _, h, w = feat.shape
    y, x = divmod(flat, w)
    return (x, y), feat[:, y, x]


def query_update(qset: TargetQuerySet, salient: Tensor, w: ModelWeights,
                 cfg: EngineConfig, frame_idx: int,
                 attn_sink: Optional[list] = None) -> TargetQuerySet:
    """Additive update from the K salient features (cross-attention).

    K = 0 means nothing was selected; the set passes through unchanged.
    """
    if salient.shape[0] == 0:
        return qset
    attended = multihead_attention(qset.queries, salient, w, "queries.update", 1, attn_sink)
    new_q = ops.layer_norm(qset.queries + attended,
                           w["queries.update.ln.gamma"], w["queries.update.ln.beta"])
    return TargetQuerySet(object_id=qset.object_id, queries=new_q,
                          last_update_frame=frame_idx)


def discriminative_refresh(qset: TargetQuerySet, fused_s4: Tensor,
                           w: ModelWeights, cfg: EngineConfig, frame_idx: int,
                           attn_sink: Optional[list] = None) -> TargetQuerySet:
    """One salient feature per query, folded back through query_update.

    A query's pick is kept only when its similarity clears the
    configured threshold; the default threshold of -inf keeps all M.
    """
    picked = []
    for m in range(qset.queries.shape[0]):
        (x, y), feature = discriminative_select(qset.queries[m, :], fused_s4)
        sim = _cosine(qset.queries.data[m], fused_s4.data[:, y, x])
        if sim >= cfg.query_threshold:
            picked.append(feature.reshape(1, -1))
    if not picked:
        return qset
    salient = concat(picked, axis=0) if len(picked) > 1 else picked[0]
    return query_update(qset, salient, w, cfg, frame_idx, attn_sink)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def query_transformer(qsets: List[TargetQuerySet], fused: FeaturePyramid,
                      w: ModelWeights, cfg: EngineConfig,
                      attn_sink: Optional[list] = None
                      ) -> Tuple[List[TargetQuerySet], List[Tensor]]:
    """Let each object's queries read the stride-4 features and talk to
    each other, then emit a per-pixel C-channel readout map.

    The readout mixes the M query vectors per pixel with weights from a
    softmax over query-feature dot products.
    """
    if not qsets:
        return [], []
    s4 = fused.levels[0]
    c, h, wd = s4.shape
    tokens = s4.reshape(c, h * wd).T
    scale = 1.0 / math.sqrt(c)
    new_sets, maps = [], []
    for qset in qsets:
        q = qset.queries
        crossed = multihead_attention(q, tokens, w, "queries.cross", 1, attn_sink)
        q = ops.layer_norm(q + crossed, w["queries.cross.ln.gamma"], w["queries.cross.ln.beta"])
        selfed = multihead_attention(q, q, w, "queries.selfattn", 1, attn_sink)
        q = ops.layer_norm(q + selfed, w["queries.selfattn.ln.gamma"], w["queries.selfattn.ln.beta"])
        logits = ops.matmul(tokens, q.T) * scale           # [T, M]
        probs = ops.softmax(logits, axis=-1)
        if attn_sink is not None:
            attn_sink.append(probs.data)
        mixed = ops.matmul(probs, q)                        # [T, C]
        maps.append(mixed.T.reshape(c, h, wd))
        new_sets.append(TargetQuerySet(object_id=qset.object_id, queries=q,
                                       last_update_frame=qset.last_update_frame))
    return new_sets, maps
