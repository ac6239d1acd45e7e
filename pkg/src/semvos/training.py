"""Clip-based training loop with momentum SGD.

Each step draws a short clip from one training sequence, selects three
frames in temporal order, initializes the engine state from the ground
truth on the first one, and supervises the remaining two with sampled
point losses. Memory is written on every processed frame and query
updates always run, so gradients flow through storage and retrieval
into earlier frames.

Every random draw comes from a generator seeded by (config seed, step),
which makes each step reproducible in isolation: step ordering never
shifts the sampling of later steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import EngineConfig
from .decoder import decode, soft_aggregate
from .encoder import encode_frame
from .engine import SequenceManifest, load_frame_array
from .errors import DataError, NumericalError
from .fusion import fuse
from .memory import MemoryBank, encode_key, encode_value, readout
from .queries import discriminative_refresh, init_query_set, query_transformer
from .tensor import Tensor, concat
from .weights import ModelWeights
from . import imagefiles, ops

STEP_SEED_TAG = 7919  # separates the training stream from other seed uses


@dataclass
class TrainHyper:
    steps: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    frames_per_clip: int = 8
    train_frames: int = 3
    max_targets: int = 3
    points_k: int = 32
    log_every: int = 25


def sample_points(mask: np.ndarray, k: int, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """k pixel positions drawn uniformly over the frame, with labels."""
    h, w = mask.shape
    ys = rng.integers(0, h, size=k)
    xs = rng.integers(0, w, size=k)
    return ys, xs, mask[ys, xs].astype(np.int64)


def _select_clip(man: SequenceManifest, hyper: TrainHyper,
                 rng: np.random.Generator) -> List[int]:
    n = len(man.frames)
    if n < hyper.train_frames:
        raise DataError(f"sequence {man.name} has {n} frames, "
                        f"need at least {hyper.train_frames} to train")
    span = min(hyper.frames_per_clip, n)
    start = int(rng.integers(0, n - span + 1))
    picks = rng.choice(span, size=hyper.train_frames, replace=False)
    return sorted(start + int(p) for p in picks)


def _reference_objects(mask: np.ndarray, max_targets: int) -> List[int]:
    ids = sorted(int(v) for v in np.unique(mask) if v != 0)
    return ids[:max_targets]


def _mask_to_size(mask: np.ndarray, size: int) -> Tensor:
    t = Tensor(mask.reshape(1, *mask.shape))
    return ops.resize_bilinear(t, size, size)


def train_step(manifests: Sequence[SequenceManifest], cfg: EngineConfig,
               w: ModelWeights, hyper: TrainHyper, step: int) -> Tensor:
    """Forward pass of one step; returns the scalar loss tensor.

    Redraws from the same per-step stream when the sampled reference
    frame has no objects to track.
    """
    rng = np.random.default_rng([cfg.seed, STEP_SEED_TAG, step])
    for _attempt in range(16):
        man = manifests[int(rng.integers(0, len(manifests)))]
        frames = _select_clip(man, hyper, rng)
        if man.gt_masks is None:
            raise DataError(f"sequence {man.name} has no GT masks; cannot train on it")
        ref_mask = imagefiles.read_pgm(man.gt_masks[frames[0]])
        object_ids = _reference_objects(ref_mask, hyper.max_targets)
        if object_ids:
            break
    else:
        raise DataError("could not sample a reference frame containing any object")

    size = cfg.variant_size(1.0)
    channel = {oid: i + 1 for i, oid in enumerate(object_ids)}

    # reference frame: ground truth seeds the queries and the memory
    img = Tensor(load_frame_array(man.frames[frames[0]]))
    img = ops.resize_bilinear(img, size, size)
    sem, pyr = encode_frame(img, w, cfg)
    fused = fuse(pyr, sem, w, cfg)
    key_map = encode_key(fused.levels[2], w)
    banks: Dict[int, MemoryBank] = {}
    qsets = {}
    for oid in object_ids:
        m = _mask_to_size((ref_mask == oid).astype(np.float64), size)
        qsets[oid] = init_query_set(oid, fused.levels[0],
                                    ops.block_mean(m, 4).data[0], w, cfg)
        bank = MemoryBank(capacity=cfg.memory_capacity, interval=cfg.memory_interval)
        bank.store(key_map, encode_value(fused.levels[2], ops.block_mean(m, 16), w),
                   frame_idx=0)
        banks[oid] = bank

    point_losses = []
    for t in frames[1:]:
        img = Tensor(load_frame_array(man.frames[t]))
        hw = img.shape[1:]
        img = ops.resize_bilinear(img, size, size)
        sem, pyr = encode_frame(img, w, cfg)
        fused = fuse(pyr, sem, w, cfg)
        key_map = encode_key(fused.levels[2], w)
        s4 = fused.levels[0]

        sets, maps = query_transformer([qsets[oid] for oid in object_ids],
                                       fused, w, cfg)
        probs = []
        for oid, qset, rmap in zip(object_ids, sets, maps):
            qsets[oid] = qset
            mem16 = readout(key_map, banks[oid])
            mem4 = ops.resize_bilinear(mem16, s4.shape[1], s4.shape[2])
            logits = decode(fused, rmap, mem4, w, hw)
            probs.append(logits.sigmoid())
        agg = soft_aggregate(probs)

        gt = imagefiles.read_pgm(man.gt_masks[t])
        ys, xs, raw_labels = sample_points(gt, hyper.points_k, rng)
        labels = np.array([channel.get(int(l), 0) for l in raw_labels])
        point_losses.append(agg[labels, ys, xs].log() * -1.0)

        # write this frame back into memory with the soft predictions
        for i, oid in enumerate(object_ids):
            soft = agg[i + 1, :, :]
            m = ops.resize_bilinear(soft.reshape(1, *soft.shape), size, size)
            banks[oid].store(key_map,
                             encode_value(fused.levels[2], ops.block_mean(m, 16), w),
                             frame_idx=t - frames[0])
            qsets[oid] = discriminative_refresh(qsets[oid], s4, w, cfg,
                                                frame_idx=t - frames[0])

    return concat(point_losses, axis=0).mean()


def sgd_update(w: ModelWeights, velocity: Dict[str, np.ndarray],
               lr: float, momentum: float, freeze_vit: bool) -> None:
    for name, p in w.parameters(freeze_vit=freeze_vit):
        if p.grad is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v - lr * p.grad
        velocity[name] = v
        p.data += v


def train(manifests: Sequence[SequenceManifest], cfg: EngineConfig,
          w: ModelWeights, hyper: TrainHyper,
          log_path: Optional[str] = None) -> List[float]:
    """Run the full loop; mutates `w` in place and returns per-step losses."""
    cfg.validate()
    if not manifests:
        raise DataError("training needs at least one sequence")
    velocity: Dict[str, np.ndarray] = {}
    losses: List[float] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(hyper.steps):
            w.zero_grad()
            loss = train_step(manifests, cfg, w, hyper, step)
            val = float(loss.data)
            if not math.isfinite(val):
                raise NumericalError(f"non-finite loss {val} at step {step}")
            loss.backward()
            sgd_update(w, velocity, hyper.lr, hyper.momentum, cfg.freeze_vit)
            losses.append(val)
            if log_fh and (step % hyper.log_every == 0 or step == hyper.steps - 1):
                log_fh.write(json.dumps({"step": step, "loss": val}) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return losses
