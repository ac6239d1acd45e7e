"""Independent reference implementations for self-verification.

Everything here is deliberately brute force: explicit loops, dense
enumeration, and pairwise distance scans. The production code must
agree with these within documented tolerances; the `selftest` command
and the test suite both drive the comparisons. None of this is used on
the inference or training paths.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            total = 0.0
            for t in range(k):
                total += a[i, t] * b[t, j]
            out[i, j] = total
    return out


def bilinear_oracle(feature_map: np.ndarray, x: float, y: float) -> np.ndarray:
    """Scalar 4-corner interpolation with border clamping."""
    c, h, w = feature_map.shape
    cx = min(max(x, 0.0), w - 1.0)
    cy = min(max(y, 0.0), h - 1.0)
    x0 = min(int(math.floor(cx)), max(w - 2, 0))
    y0 = min(int(math.floor(cy)), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    out = np.zeros(c)
    for ci in range(c):
        out[ci] = (feature_map[ci, y0, x0] * (1 - fy) * (1 - fx)
                   + feature_map[ci, y0, x1] * (1 - fy) * fx
                   + feature_map[ci, y1, x0] * fy * (1 - fx)
                   + feature_map[ci, y1, x1] * fy * fx)
    return out


def deform_attn_oracle(queries: np.ndarray, refs: np.ndarray,
                       levels: List[np.ndarray], params: Dict[str, np.ndarray],
                       heads: int, points: int) -> np.ndarray:
    """Dense enumeration of deformable attention, one sample at a time.

    Mirrors the production convention exactly: per-level value
    projection, texel-unit offsets divided by level size, pixel
    positions x_norm * W - 0.5, per-head softmax over every
    (level, point) weight, output projection, residual, layer norm.
    """
    t, c = queries.shape
    n_levels = len(levels)
    ch = c // heads
    value_maps = []
    for lv in levels:
        cl, h, w = lv.shape
        tokens = lv.reshape(cl, h * w).T @ params["value.weight"] + params["value.bias"]
        value_maps.append(tokens.T.reshape(c, h, w))

    out = np.zeros((t, c))
    for qi in range(t):
        off = (queries[qi] @ params["offset.weight"] + params["offset.bias"]).reshape(
            heads, n_levels, points, 2)
        logits = (queries[qi] @ params["weight.weight"] + params["weight.bias"]).reshape(
            heads, n_levels * points)
        for hd in range(heads):
            row = logits[hd]
            e = np.exp(row - row.max())
            probs = e / e.sum()
            acc = np.zeros(ch)
            for li in range(n_levels):
                _, lh, lw = levels[li].shape
                vhead = value_maps[li][hd * ch:(hd + 1) * ch]
                for pi in range(points):
                    nx = refs[qi, 0] + off[hd, li, pi, 0] / lw
                    ny = refs[qi, 1] + off[hd, li, pi, 1] / lh
                    sample = bilinear_oracle(vhead, nx * lw - 0.5, ny * lh - 0.5)
                    acc += probs[li * points + pi] * sample
            out[qi, hd * ch:(hd + 1) * ch] = acc
    projected = out @ params["out.weight"] + params["out.bias"]
    pre = queries + projected
    mu = pre.mean(axis=1, keepdims=True)
    var = ((pre - mu) ** 2).mean(axis=1, keepdims=True)
    normed = (pre - mu) / np.sqrt(var + 1e-5)
    return params["ln.gamma"] * normed + params["ln.beta"]


def two_key_attention_oracle(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                             wq, bq, wk, bk, wv, bv, wo, bo) -> np.ndarray:
    """Single-head attention over exactly two key/value tokens."""
    qp = q @ wq + bq
    kp = keys @ wk + bk
    vp = values @ wv + bv
    scale = 1.0 / math.sqrt(q.shape[-1])
    out = np.zeros_like(qp)
    for i in range(qp.shape[0]):
        logits = np.array([qp[i] @ kp[0], qp[i] @ kp[1]]) * scale
        e = np.exp(logits - logits.max())
        a = e / e.sum()
        out[i] = a[0] * vp[0] + a[1] * vp[1]
    return out @ wo + bo


def readout_oracle(query_key: np.ndarray, entry_keys: List[np.ndarray],
                   entry_values: List[np.ndarray]) -> np.ndarray:
    """Dense affinity matrix memory readout, element by element."""
    ck, h, w = query_key.shape
    q = query_key.reshape(ck, h * w).T
    mk = np.concatenate([k.reshape(ck, -1).T for k in entry_keys], axis=0)
    mv = np.concatenate([v.reshape(v.shape[0], -1).T for v in entry_values], axis=0)
    tq, s = q.shape[0], mk.shape[0]
    aff = np.zeros((tq, s))
    for i in range(tq):
        for j in range(s):
            aff[i, j] = -((q[i] - mk[j]) ** 2).sum()
    e = np.exp(aff - aff.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    out = probs @ mv
    return out.T.reshape(mv.shape[1], h, w)


def argmax_scan_oracle(sims: np.ndarray) -> Tuple[int, int]:
    """First strictly-greater scan in row-major order; returns (x, y)."""
    h, w = sims.shape
    best = -np.inf
    bx = by = 0
    for y in range(h):
        for x in range(w):
            if sims[y, x] > best:
                best = sims[y, x]
                bx, by = x, y
    return bx, by


def cosine_map_oracle(query: np.ndarray, feat: np.ndarray) -> np.ndarray:
    c, h, w = feat.shape
    out = np.zeros((h, w))
    qn = math.sqrt(float((query ** 2).sum()))
    for y in range(h):
        for x in range(w):
            col = feat[:, y, x]
            n = math.sqrt(float((col ** 2).sum()))
            if qn > 0 and n > 0:
                out[y, x] = float(query @ col) / (qn * n)
    return out


def jaccard_oracle(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = union = 0
    p = pred.astype(bool).ravel()
    g = gt.astype(bool).ravel()
    for a, b in zip(p.tolist(), g.tolist()):
        if a and b:
            inter += 1
        if a or b:
            union += 1
    return 1.0 if union == 0 else inter / union


def boundary_extract_oracle(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            edge = (y == 0 or x == 0 or y == h - 1 or x == w - 1)
            if not edge:
                edge = not (m[y - 1, x] and m[y + 1, x] and m[y, x - 1] and m[y, x + 1])
            out[y, x] = edge
    return out


def boundary_f_oracle(pred: np.ndarray, gt: np.ndarray, tol: float) -> float:
    """F-measure from explicit pairwise boundary distances."""
    pb = boundary_extract_oracle(pred)
    gb = boundary_extract_oracle(gt)
    p_pts = np.argwhere(pb)
    g_pts = np.argwhere(gb)
    if len(p_pts) == 0 and len(g_pts) == 0:
        return 1.0
    if len(p_pts) == 0 or len(g_pts) == 0:
        return 0.0
    d2 = ((p_pts[:, None, :] - g_pts[None, :, :]) ** 2).sum(axis=2)
    nearest_gt = np.sqrt(d2.min(axis=1))
    nearest_pred = np.sqrt(d2.min(axis=0))
    precision = float((nearest_gt <= tol).mean())
    recall = float((nearest_pred <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class MemoryPolicyOracle:
    """Executable specification of the storage/eviction policy.

    Tracks (frame_idx, usage, permanent) triples; mirrors interval
    gating, the permanent first frame, usage accumulation, and
    usage/(age+1) eviction with oldest-first tie-breaks.
    """

    def __init__(self, capacity: int, interval: int):
        self.capacity = capacity
        self.interval = interval
        self.entries: List[List] = []  # [frame_idx, usage, permanent]

    def should_store(self, frame_idx: int, has_target: bool) -> bool:
        if frame_idx == 0:
            return True
        return frame_idx % self.interval == 0 and has_target

    def observe(self, frame_idx: int, has_target: bool,
                usage_deltas: Sequence[float]) -> None:
        """One frame: credit readout usage to current entries, then store."""
        assert len(usage_deltas) == len(self.entries)
        for entry, delta in zip(self.entries, usage_deltas):
            entry[1] += delta
        if self.should_store(frame_idx, has_target):
            self.entries.append([frame_idx, 0.0, frame_idx == 0])
            while sum(1 for e in self.entries if not e[2]) > self.capacity:
                working = [e for e in self.entries if not e[2]]
                victim = min(working, key=lambda e: (e[1] / (frame_idx - e[0] + 1), e[0]))
                self.entries.remove(victim)

    def stored_frames(self) -> List[int]:
        return [e[0] for e in self.entries]
