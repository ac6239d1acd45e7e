"""Sequence inference: multi-scale + flip variants, memory, fusion.

The engine keeps fully independent state per (scale, flip) variant and
per object: its own memory bank and query set, fed only by that
variant's geometry. Per frame each variant produces per-object
probability maps; those are resized to the input resolution, un-flipped,
soft-aggregated per variant, and averaged across variants with
`fuse_scales`. The storage policy (interval, skip target-less frames)
is decided once per frame from the fused prediction and applied to every
variant's state.

Two bit-exactness guarantees shape this file: flipping the input video
and un-flipping the outputs reproduces the unflipped run exactly (the
variant set is the same, and both the resize and the fusion tree commute
with mirroring), and saving/reloading the run state mid-sequence resumes
exactly (state passes through float32 after every frame, matching
checkpoint precision).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import EngineConfig
from .decoder import argmax_label, decode, soft_aggregate
from .encoder import FeaturePyramid, encode_frame
from .errors import DataError, DimensionError
from .fusion import fuse
from .memory import (MemoryBank, MemoryEntry, encode_key, encode_value,
                     readout, should_store)
from .metrics import EvalReport, evaluate_sequence
from .queries import (TargetQuerySet, discriminative_refresh, init_query_set,
                      query_transformer)
from .tensor import Tensor, no_grad
from .weights import ModelWeights
from . import imagefiles, ops, tensorio


@dataclass
class SequenceManifest:
    name: str
    width: int
    height: int
    frames: List[str]
    first_frame_annotation: str
    gt_masks: Optional[List[str]] = None

    @classmethod
    def load(cls, path: str) -> "SequenceManifest":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        try:
            m = cls(name=raw["name"], width=int(raw["width"]), height=int(raw["height"]),
                    frames=[resolve(p) for p in raw["frames"]],
                    first_frame_annotation=resolve(raw["first_frame_annotation"]),
                    gt_masks=[resolve(p) for p in raw["gt_masks"]] if raw.get("gt_masks") else None)
        except KeyError as exc:
            raise DataError(f"manifest {path} lacks required field {exc}") from exc
        if len(m.frames) < 2:
            raise DataError(f"manifest {path} needs at least 2 frames")
        if m.gt_masks is not None and len(m.gt_masks) != len(m.frames):
            raise DataError(f"manifest {path}: GT mask count does not match frame count")
        return m


@dataclass
class VariantSpec:
    scale: float
    flip: bool
    size: int


@dataclass
class ObjectState:
    bank: MemoryBank
    qset: TargetQuerySet


@dataclass
class VariantState:
    objects: Dict[int, ObjectState] = field(default_factory=dict)


@dataclass
class RunState:
    variants: List[VariantState]
    object_ids: List[int]
    next_frame: int


def variant_list(cfg: EngineConfig) -> List[VariantSpec]:
    out = []
    for scale in cfg.scales:
        for flip in ((False, True) if cfg.flip_fusion else (False,)):
            out.append(VariantSpec(scale=scale, flip=flip, size=cfg.variant_size(scale)))
    return out


def load_frame_array(path: str) -> np.ndarray:
    """PPM file to float [3, H, W] in [0, 1]."""
    rgb = imagefiles.read_ppm(path)
    return rgb.astype(np.float64).transpose(2, 0, 1) / 255.0


def validate_annotation(ann: np.ndarray) -> List[int]:
    ids = sorted(int(v) for v in np.unique(ann) if v != 0)
    if not ids:
        raise DataError("annotation contains no objects")
    if ids != list(range(1, len(ids) + 1)):
        raise DataError(f"annotation labels must be contiguous 1..n, got {ids}")
    return ids


def _flip_w(x: Tensor) -> Tensor:
    idx = np.arange(x.shape[-1] - 1, -1, -1)
    return x[:, idx] if x.ndim == 2 else x[:, :, idx]


def prepare_variant_image(img: np.ndarray, v: VariantSpec) -> Tensor:
    t = Tensor(img[:, :, ::-1].copy() if v.flip else img)
    return ops.resize_bilinear(t, v.size, v.size)


def mask_to_variant(mask: Tensor, v: VariantSpec) -> Tensor:
    """[H, W] map into the variant's geometry as soft [1, S, S]."""
    m = _flip_w(mask) if v.flip else mask
    return ops.resize_bilinear(m.reshape(1, *m.shape), v.size, v.size)


def prob_to_input_space(prob: Tensor, v: VariantSpec, hw: Tuple[int, int]) -> Tensor:
    """[S, S] variant probability back to input-resolution, un-flipped."""
    up = ops.resize_bilinear(prob.reshape(1, *prob.shape), hw[0], hw[1])
    if v.flip:
        up = _flip_w(up)
    return up.reshape(hw[0], hw[1])


@dataclass
class FrameContext:
    """Per-variant tensors a frame's state updates need."""
    fused: FeaturePyramid
    key_map: Tensor


def encode_fuse_variant(image: Tensor, w: ModelWeights, cfg: EngineConfig):
    sem, pyramid = encode_frame(image, w, cfg)
    fused = fuse(pyramid, sem, w, cfg)
    return fused


def init_state(ann: np.ndarray, frame0: np.ndarray, w: ModelWeights,
               cfg: EngineConfig) -> RunState:
    """Frame 0: permanent memory entry and initial queries per variant."""
    object_ids = validate_annotation(ann)
    variants = variant_list(cfg)
    states = []
    for v in variants:
        fused = encode_fuse_variant(prepare_variant_image(frame0, v), w, cfg)
        key_map = encode_key(fused.levels[2], w)
        vstate = VariantState()
        for oid in object_ids:
            mask = mask_to_variant(Tensor((ann == oid).astype(np.float64)), v)
            mask4 = ops.block_mean(mask, 4)
            mask16 = ops.block_mean(mask, 16)
            qset = init_query_set(oid, fused.levels[0], mask4.data[0], w, cfg)
            bank = MemoryBank(capacity=cfg.memory_capacity, interval=cfg.memory_interval)
            bank.store(key_map, encode_value(fused.levels[2], mask16, w), frame_idx=0)
            vstate.objects[oid] = ObjectState(bank=bank, qset=qset)
        states.append(vstate)
    return RunState(variants=states, object_ids=object_ids, next_frame=1)


def process_variant_frame(image: Tensor, vstate: VariantState, object_ids: List[int],
                          w: ModelWeights, cfg: EngineConfig
                          ) -> Tuple[Dict[int, Tensor], FrameContext]:
    """One variant, one frame: per-object sigmoid probability maps.

    Persists the query-transformer outputs into the variant state; the
    discriminative update happens separately on storage frames.
    """
    fused = encode_fuse_variant(image, w, cfg)
    key_map = encode_key(fused.levels[2], w)
    s4 = fused.levels[0]
    h4, w4 = s4.shape[1], s4.shape[2]

    qsets = [vstate.objects[oid].qset for oid in object_ids]
    new_qsets, readout_maps = query_transformer(qsets, fused, w, cfg)
    probs = {}
    for oid, qset, rmap in zip(object_ids, new_qsets, readout_maps):
        vstate.objects[oid].qset = qset
        mem16 = readout(key_map, vstate.objects[oid].bank)
        mem4 = ops.resize_bilinear(mem16, h4, w4)
        logits = decode(fused, rmap, mem4, w, (image.shape[1], image.shape[2]))
        probs[oid] = logits.sigmoid()
    return probs, FrameContext(fused=fused, key_map=key_map)


def fuse_scales(prob_maps: Sequence[Tensor]) -> Tensor:
    """Mean of aligned per-label distributions, renormalized per pixel.

    The sum is a balanced tree over adjacent pairs. Because float
    addition commutes bitwise, swapping the two members of any pair
    (exactly what happens to flip-mate variants when the input video is
    mirrored) leaves every intermediate bit unchanged.
    """
    maps = list(prob_maps)
    if not maps:
        raise DimensionError("fuse_scales needs at least one map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise DimensionError(f"fused maps disagree: {m.shape} vs {shape}")
    k = len(maps)
    while len(maps) > 1:
        nxt = [maps[i] + maps[i + 1] for i in range(0, len(maps) - 1, 2)]
        if len(maps) % 2:
            nxt.append(maps[-1])
        maps = nxt
    mean = maps[0] * (1.0 / k)
    total = mean.sum(axis=0, keepdims=True)
    return mean / total


def aggregate_frame(per_variant_probs: List[Dict[int, Tensor]],
                    variants: List[VariantSpec], object_ids: List[int],
                    hw: Tuple[int, int]) -> Tensor:
    """Per-variant soft aggregation, then cross-variant fusion."""
    agg_maps = []
    for v, probs in zip(variants, per_variant_probs):
        object_maps = [prob_to_input_space(probs[oid], v, hw) for oid in object_ids]
        agg_maps.append(soft_aggregate(object_maps))
    return fuse_scales(agg_maps)


def apply_state_updates(state: RunState, contexts: List[FrameContext],
                        fused_agg: Tensor, labels: np.ndarray, frame_idx: int,
                        variants: List[VariantSpec], w: ModelWeights,
                        cfg: EngineConfig, hw: Tuple[int, int],
                        enable_query_updates: bool = True,
                        store_all: bool = False) -> None:
    """Store memory and update queries for objects due this frame."""
    for idx, oid in enumerate(state.object_ids):
        has_target = bool((labels == oid).any())
        if not (store_all or should_store(frame_idx, has_target, cfg.memory_interval)):
            continue
        fused_prob = fused_agg[idx + 1, :, :]
        for v, vstate, ctx in zip(variants, state.variants, contexts):
            mask_var = mask_to_variant(fused_prob, v)
            value = encode_value(ctx.fused.levels[2], ops.block_mean(mask_var, 16), w)
            vstate.objects[oid].bank.store(ctx.key_map, value, frame_idx)
            if enable_query_updates:
                vstate.objects[oid].qset = discriminative_refresh(
                    vstate.objects[oid].qset, ctx.fused.levels[0], w, cfg, frame_idx)


def quantize_state(state: RunState) -> None:
    """Round all run state through float32, the checkpoint precision."""

    def q(arr: np.ndarray) -> np.ndarray:
        return arr.astype(np.float32).astype(np.float64)

    for vstate in state.variants:
        for ostate in vstate.objects.values():
            for e in ostate.bank.entries:
                e.key = Tensor(q(e.key.data))
                e.value = Tensor(q(e.value.data))
                e.usage = float(np.float32(e.usage))
            ostate.qset = TargetQuerySet(object_id=ostate.qset.object_id,
                                         queries=Tensor(q(ostate.qset.queries.data)),
                                         last_update_frame=ostate.qset.last_update_frame)


def run_sequence(manifest: SequenceManifest, cfg: EngineConfig, w: ModelWeights,
                 out_dir: Optional[str] = None,
                 enable_query_updates: bool = True,
                 state: Optional[RunState] = None,
                 stop_after: Optional[int] = None
                 ) -> Tuple[List[np.ndarray], Optional[EvalReport], RunState]:
    """Propagate the first-frame annotation through the whole sequence.

    Returns (per-frame label masks, report when GT is available, final
    run state). `state`/`stop_after` allow split runs for resumption.
    """
    cfg.validate()
    ann = imagefiles.read_pgm(manifest.first_frame_annotation)
    if ann.shape != (manifest.height, manifest.width):
        raise DataError(f"annotation {ann.shape} does not match manifest size "
                        f"{(manifest.height, manifest.width)}")
    hw = (manifest.height, manifest.width)
    variants = variant_list(cfg)
    outputs: List[np.ndarray] = []
    started_fresh = state is None

    with no_grad():
        if state is None:
            frame0 = load_frame_array(manifest.frames[0])
            if frame0.shape[1:] != hw:
                raise DataError(f"frame 0 is {frame0.shape[1:]}, manifest says {hw}")
            state = init_state(ann, frame0, w, cfg)
            quantize_state(state)
            outputs.append(ann.astype(np.int32))
            if out_dir:
                _write_prediction(out_dir, 0, ann)
        last = len(manifest.frames) - 1 if stop_after is None else stop_after
        for t in range(state.next_frame, last + 1):
            img = load_frame_array(manifest.frames[t])
            if img.shape[1:] != hw:
                raise DataError(f"frame {t} is {img.shape[1:]}, manifest says {hw}")
            per_variant = []
            contexts = []
            for v, vstate in zip(variants, state.variants):
                probs, ctx = process_variant_frame(prepare_variant_image(img, v),
                                                   vstate, state.object_ids, w, cfg)
                per_variant.append(probs)
                contexts.append(ctx)
            fused_agg = aggregate_frame(per_variant, variants, state.object_ids, hw)
            labels = argmax_label(fused_agg)
            apply_state_updates(state, contexts, fused_agg, labels, t, variants,
                                w, cfg, hw, enable_query_updates=enable_query_updates)
            quantize_state(state)
            state.next_frame = t + 1
            outputs.append(labels)
            if out_dir:
                _write_prediction(out_dir, t, labels)

    report = None
    if manifest.gt_masks is not None and stop_after is None and started_fresh:
        gts = [imagefiles.read_pgm(p) for p in manifest.gt_masks]
        report = evaluate_sequence(outputs, gts, ignore_first_frame=True,
                                   object_ids=state.object_ids)
    return outputs, report, state


def _write_prediction(out_dir: str, t: int, labels: np.ndarray) -> None:
    os.makedirs(out_dir, exist_ok=True)
    imagefiles.write_pgm(os.path.join(out_dir, f"{t:03d}.pgm"),
                         labels.astype(np.uint8))


# ---- run-state persistence --------------------------------------------------

def save_state(state: RunState, path: str) -> None:
    tensors: Dict[str, np.ndarray] = {}
    meta_entries = []
    for vi, vstate in enumerate(state.variants):
        for oid, ostate in vstate.objects.items():
            for ei, e in enumerate(ostate.bank.entries):
                tag = f"v{vi}.o{oid}.e{ei}"
                tensors[tag + ".key"] = e.key.data
                tensors[tag + ".value"] = e.value.data
                meta_entries.append({"variant": vi, "object": oid, "entry": ei,
                                     "frame_idx": e.frame_idx, "usage": e.usage,
                                     "permanent": e.permanent})
            tensors[f"v{vi}.o{oid}.queries"] = ostate.qset.queries.data
    meta = {
        "kind": "run-state",
        "next_frame": state.next_frame,
        "object_ids": state.object_ids,
        "n_variants": len(state.variants),
        "entries": meta_entries,
        "last_update": [{f"{oid}": vs.objects[oid].qset.last_update_frame
                         for oid in vs.objects} for vs in state.variants],
    }
    tensorio.save_checkpoint(path, tensors, meta)


def load_state(path: str, cfg: EngineConfig) -> RunState:
    arrays, meta = tensorio.load_checkpoint(path)
    if meta.get("kind") != "run-state":
        raise DataError(f"{path} is not a run-state checkpoint")
    object_ids = [int(i) for i in meta["object_ids"]]
    variants = [VariantState() for _ in range(int(meta["n_variants"]))]
    for vi, vstate in enumerate(variants):
        for oid in object_ids:
            bank = MemoryBank(capacity=cfg.memory_capacity, interval=cfg.memory_interval)
            vstate.objects[oid] = ObjectState(
                bank=bank,
                qset=TargetQuerySet(
                    object_id=oid,
                    queries=Tensor(arrays[f"v{vi}.o{oid}.queries"]),
                    last_update_frame=int(meta["last_update"][vi][str(oid)])))
    for rec in meta["entries"]:
        vi, oid, ei = rec["variant"], rec["object"], rec["entry"]
        tag = f"v{vi}.o{oid}.e{ei}"
        variants[vi].objects[oid].bank.entries.append(MemoryEntry(
            key=Tensor(arrays[tag + ".key"]), value=Tensor(arrays[tag + ".value"]),
            frame_idx=int(rec["frame_idx"]), usage=float(rec["usage"]),
            permanent=bool(rec["permanent"])))
    return RunState(variants=variants, object_ids=object_ids,
                    next_frame=int(meta["next_frame"]))
