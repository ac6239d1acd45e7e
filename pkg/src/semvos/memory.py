"""Key/value frame memory with an interval storage policy.

Each object keeps a bank of (key, value) feature maps from past frames.
Readout compares the current frame's keys against every stored key
location with a negative squared L2 affinity, softmax-normalizes over
all memory locations, and mixes the stored values. Every readout also
credits the attended entries with the affinity mass they received; that
usage statistic, divided by entry age, decides which entry to evict
when the bank outgrows its capacity. The frame-0 entry is permanent
because it carries the ground-truth annotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor, concat
from . import ops


@dataclass
class MemoryEntry:
    key: Tensor      # [Ck, h, w]
    value: Tensor    # [Cv, h, w]
    frame_idx: int
    usage: float = 0.0
    permanent: bool = False


@dataclass
class MemoryBank:
    capacity: int = 8
    interval: int = 3
    entries: List[MemoryEntry] = field(default_factory=list)

    def working_count(self) -> int:
        return sum(1 for e in self.entries if not e.permanent)

    def store(self, key: Tensor, value: Tensor, frame_idx: int,
              current_frame: Optional[int] = None) -> None:
        if key.shape[1:] != value.shape[1:]:
            raise DimensionError(f"key/value spatial dims disagree: {key.shape} vs {value.shape}")
        if self.entries and frame_idx <= self.entries[-1].frame_idx:
            raise StateError(f"store at frame {frame_idx} after frame {self.entries[-1].frame_idx}")
        self.entries.append(MemoryEntry(key=key, value=value, frame_idx=frame_idx,
                                        usage=0.0, permanent=(frame_idx == 0)))
        if self.working_count() > self.capacity:
            self.consolidate(frame_idx if current_frame is None else current_frame)

    def consolidate(self, current_frame: int) -> None:
        """Evict least-useful working entries until within capacity.

        Usefulness is usage / (current - frame_idx + 1); the +1 keeps the
        just-stored entry's age positive. Equal scores evict the oldest.
        """
        while self.working_count() > self.capacity:
            candidates = [e for e in self.entries if not e.permanent]
            if not candidates:
                raise StateError("cannot consolidate: only permanent entries remain")
            victim = min(candidates,
                         key=lambda e: (e.usage / (current_frame - e.frame_idx + 1), e.frame_idx))
            self.entries.remove(victim)

    def stored_frames(self) -> List[int]:
        return [e.frame_idx for e in self.entries]


def should_store(frame_idx: int, has_target: bool, interval: int) -> bool:
    """Store frame 0 always; afterwards every interval-th frame with a target."""
    if frame_idx < 0:
        raise ConfigError(f"frame index must be >= 0, got {frame_idx}")
    if interval < 1:
        raise ConfigError(f"memory interval must be >= 1, got {interval}")
    if frame_idx == 0:
        return True
    return frame_idx % interval == 0 and has_target


def readout(query_key: Tensor, bank: MemoryBank,
            record_usage: bool = True) -> Tensor:
    """Affinity-weighted value mix for every query location.

    Affinity between a query key column q and a memory column m is
    -|q - m|^2; the softmax runs over every location of every entry.
    """
    if not bank.entries:
        raise StateError("readout from an empty memory bank")
    ck, h, w = query_key.shape
    for e in bank.entries:
        if e.key.shape[0] != ck:
            raise DimensionError(f"key channel mismatch: {e.key.shape} vs {query_key.shape}")
    q = query_key.reshape(ck, h * w).T                      # [Tq, Ck]
    mk = concat([e.key.reshape(ck, -1).T for e in bank.entries], axis=0)   # [S, Ck]
    mv = concat([e.value.reshape(e.value.shape[0], -1).T for e in bank.entries], axis=0)
    q_sq = (q * q).sum(axis=1, keepdims=True)               # [Tq, 1]
    m_sq = (mk * mk).sum(axis=1, keepdims=True).T           # [1, S]
    affinity = ops.matmul(q, mk.T) * 2.0 - q_sq - m_sq      # -(|q|^2 - 2qm + |m|^2)
    probs = ops.softmax(affinity, axis=-1)                  # [Tq, S]
    if record_usage:
        mass = probs.data.sum(axis=0)
        start = 0
        for e in bank.entries:
            span = e.key.data.size // ck
            e.usage += float(mass[start:start + span].sum())
            start += span
    mixed = ops.matmul(probs, mv)                            # [Tq, Cv]
    return mixed.T.reshape(mv.shape[1], h, w)


def encode_key(fused_s16: Tensor, w, prefix: str = "memory.key") -> Tensor:
    """Project the fused stride-16 level to key channels."""
    c, h, wd = fused_s16.shape
    tokens = fused_s16.reshape(c, h * wd).T
    k = ops.linear(tokens, w[prefix + ".weight"], w[prefix + ".bias"])
    return k.T.reshape(k.shape[1], h, wd)


def encode_value(fused_s16: Tensor, mask_s16: Tensor, w,
                 prefix: str = "memory.value") -> Tensor:
    """Project fused features concatenated with the object mask plane."""
    c, h, wd = fused_s16.shape
    if mask_s16.shape != (1, h, wd):
        raise DimensionError(f"mask plane {mask_s16.shape} does not match features {fused_s16.shape}")
    x = concat([fused_s16, mask_s16], axis=0)
    tokens = x.reshape(c + 1, h * wd).T
    v = ops.linear(tokens, w[prefix + ".weight"], w[prefix + ".bias"])
    return v.T.reshape(v.shape[1], h, wd)
