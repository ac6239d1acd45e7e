"""Mask decoding and multi-object aggregation.

decode turns one object's fused stride-4 features, query readout, and
memory readout into full-resolution logits through two conv+upsample
stages. soft_aggregate merges per-object probabilities into one
distribution with an implicit background channel via odds
renormalization, the standard scheme where background probability is
the product of all per-object absences.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .encoder import FeaturePyramid
from .errors import DimensionError
from .tensor import Tensor, concat, stack
from .weights import ModelWeights
from . import ops

AGG_EPS = 1e-7


def decode(fused: FeaturePyramid, readout: Tensor, mem_readout: Tensor,
           w: ModelWeights, out_hw: Tuple[int, int]) -> Tensor:
    """Per-object raw logits at the full frame resolution [H, W]."""
    s4 = fused.levels[0]
    if readout.shape[1:] != s4.shape[1:] or mem_readout.shape[1:] != s4.shape[1:]:
        raise DimensionError(f"decoder inputs disagree spatially: {s4.shape}, "
                             f"{readout.shape}, {mem_readout.shape}")
    x = concat([s4, readout, mem_readout], axis=0)
    x = ops.conv2d(x, w["decoder.conv0.weight"], w["decoder.conv0.bias"],
                   stride=1, padding=1).relu()
    x = ops.resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2])
    x = ops.conv2d(x, w["decoder.conv1.weight"], w["decoder.conv1.bias"],
                   stride=1, padding=1).relu()
    x = ops.resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2])
    x = ops.conv2d(x, w["decoder.conv2.weight"], w["decoder.conv2.bias"],
                   stride=1, padding=1)
    x = ops.resize_bilinear(x, out_hw[0], out_hw[1])
    return x.reshape(out_hw[0], out_hw[1])


def soft_aggregate(probs: List[Tensor]) -> Tensor:
    """Merge per-object probabilities into an (n+1)-way distribution.

    Background gets the product of complements; every channel is then
    odds-renormalized per pixel. Inputs are clamped away from {0, 1} so
    the odds stay finite.
    """
    if not probs:
        raise DimensionError("soft_aggregate needs at least one object map")
    shape = probs[0].shape
    for p in probs:
        if p.shape != shape:
            raise DimensionError(f"object maps disagree: {p.shape} vs {shape}")
    clamped = [ops.clamp(p, AGG_EPS, 1.0 - AGG_EPS) for p in probs]
    bg = None
    for p in clamped:
        inv = 1.0 - p
        bg = inv if bg is None else bg * inv
    bg = ops.clamp(bg, AGG_EPS, 1.0 - AGG_EPS)
    channels = [bg] + clamped
    odds = [p / (1.0 - p) for p in channels]
    total = None
    for o in odds:
        total = o if total is None else total + o
    return stack([o / total for o in odds], axis=0)


def argmax_label(agg: "Tensor | np.ndarray") -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lower label (background 0 first)."""
    data = agg.data if isinstance(agg, Tensor) else agg
    return np.argmax(data, axis=0).astype(np.int32)
