"""Deterministic synthetic video generator: moving shapes with exact masks.

Each sequence renders up to three colored shapes (circle, rectangle,
triangle) over a textured background. Shape positions follow one of
three scripted motions: straight lines, border bounces, or an
"occluding-cross" where two shapes pass through each other so the lower
label disappears behind the upper one and reappears. Masks come from
the same analytic geometry that drives rendering, so ground truth is
exact. Label 1 is always the topmost shape.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError
from . import imagefiles

MOTIONS = ("linear", "bounce", "occluding-cross")
SHAPE_KINDS = ("circle", "rect", "triangle")


@dataclass
class SyntheticSpec:
    n_shapes: int = 1
    motion: str = "linear"
    frames: int = 8
    noise_std: float = 4.0
    seed: int = 0
    width: int = 128
    height: int = 128
    name: Optional[str] = None

    def validate(self) -> "SyntheticSpec":
        if not 1 <= self.n_shapes <= 3:
            raise ConfigError(f"n_shapes must be in 1..3, got {self.n_shapes}")
        if self.motion not in MOTIONS:
            raise ConfigError(f"motion must be one of {MOTIONS}, got {self.motion!r}")
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"frame size too small: {self.width}x{self.height}")
        return self

    def sequence_name(self) -> str:
        return self.name or f"{self.motion}-n{self.n_shapes}-s{self.seed}"

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw).validate()


def _shape_mask(kind: str, cx: float, cy: float, size: float,
                xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= size ** 2
    if kind == "rect":
        return (np.abs(xs - cx) <= size) & (np.abs(ys - cy) <= 0.8 * size)
    # triangle: apex up; vertex order chosen so that in image coords
    # (y grows downward) the interior is where every edge test is >= 0
    ax, ay = cx, cy - size
    bx, by = cx + size, cy + size
    ex, ey = cx - size, cy + size
    d1 = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
    d2 = (ex - bx) * (ys - by) - (ey - by) * (xs - bx)
    d3 = (ax - ex) * (ys - ey) - (ay - ey) * (xs - ex)
    return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def _trajectories(spec: SyntheticSpec, rng: np.random.Generator,
                  sizes: List[float]) -> List[List[Tuple[float, float]]]:
    """Per-shape center positions for every frame."""
    w, h, n = spec.width, spec.height, spec.frames
    out = []
    for i in range(spec.n_shapes):
        margin = sizes[i] + 2
        if spec.motion == "occluding-cross" and i < 2:
            # shapes 1 and 2 swap sides horizontally and meet mid-sequence
            y = h / 2 + (rng.uniform(-0.01, 0.01) * h)
            if i == 0:
                x0, x1 = margin, w - margin
            else:
                x0, x1 = w - margin, margin
            pts = [(x0 + (x1 - x0) * t / (n - 1), y) for t in range(n)]
        elif spec.motion == "bounce":
            x = rng.uniform(margin, w - margin)
            y = rng.uniform(margin, h - margin)
            vx = rng.uniform(0.04, 0.09) * w * rng.choice([-1, 1])
            vy = rng.uniform(0.04, 0.09) * h * rng.choice([-1, 1])
            pts = []
            for _ in range(n):
                pts.append((x, y))
                x += vx
                y += vy
                if x < margin or x > w - margin:
                    vx = -vx
                    x = float(np.clip(x, margin, w - margin))
                if y < margin or y > h - margin:
                    vy = -vy
                    y = float(np.clip(y, margin, h - margin))
        else:
            x0 = rng.uniform(margin, w - margin)
            y0 = rng.uniform(margin, h - margin)
            # pick an end point far enough away to guarantee real motion
            x1 = rng.uniform(margin, w - margin)
            y1 = rng.uniform(margin, h - margin)
            pts = [(x0 + (x1 - x0) * t / (n - 1), y0 + (y1 - y0) * t / (n - 1))
                   for t in range(n)]
        out.append(pts)
    return out


def render_sequence(spec: SyntheticSpec) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Return (frames as [H, W, 3] uint8, masks as [H, W] uint8 labels)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    ys, xs = np.mgrid[0:h, 0:w].astype(float)

    base = rng.uniform(40, 90, size=3)
    fx, fy = rng.uniform(2.0, 5.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = (18.0 * np.sin(2 * np.pi * fx * xs / w + phase[0])
               + 14.0 * np.sin(2 * np.pi * fy * ys / h + phase[1]))

    kinds = [SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))] for _ in range(spec.n_shapes)]
    min_dim = min(w, h)
    if spec.motion == "occluding-cross":
        # the top shape must fully swallow the second at the crossing,
        # including the half-step miss when the frame count is even
        sizes = [0.19 * min_dim, 0.095 * min_dim, 0.10 * min_dim][:spec.n_shapes]
        kinds[0] = "circle"
        if spec.n_shapes >= 2:
            kinds[1] = "circle"
    else:
        sizes = [float(rng.uniform(0.10, 0.17) * min_dim) for _ in range(spec.n_shapes)]
    colors = []
    for i in range(spec.n_shapes):
        hue = rng.uniform(0, 1)
        col = np.array([170 + 60 * np.sin(2 * np.pi * hue),
                        170 + 60 * np.sin(2 * np.pi * hue + 2.1),
                        170 + 60 * np.sin(2 * np.pi * hue + 4.2)])
        colors.append(np.clip(col, 120, 240))
    paths = _trajectories(spec, rng, sizes)
    noise = rng.normal(0.0, spec.noise_std, size=(spec.frames, h, w, 3))

    frames, masks = [], []
    for t in range(spec.frames):
        label = np.zeros((h, w), dtype=np.uint8)
        img = np.empty((h, w, 3))
        img[:] = base + texture[..., None]
        # paint high labels first so label 1 ends up on top
        for i in range(spec.n_shapes - 1, -1, -1):
            cx, cy = paths[i][t]
            m = _shape_mask(kinds[i], cx, cy, sizes[i], xs, ys)
            label[m] = i + 1
            img[m] = colors[i]
        img = np.clip(img + noise[t], 0, 255).astype(np.uint8)
        frames.append(img)
        masks.append(label)
    return frames, masks


def gen_synthetic(spec: SyntheticSpec, out_dir: str) -> str:
    """Write frames, masks, and a manifest; returns the manifest path."""
    frames, masks = render_sequence(spec)
    name = spec.sequence_name()
    seq_dir = os.path.join(out_dir, name)
    os.makedirs(os.path.join(seq_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(seq_dir, "masks"), exist_ok=True)
    frame_paths, mask_paths = [], []
    for t, (img, mask) in enumerate(zip(frames, masks)):
        fp = os.path.join("frames", f"{t:03d}.ppm")
        mp = os.path.join("masks", f"{t:03d}.pgm")
        imagefiles.write_ppm(os.path.join(seq_dir, fp), img)
        imagefiles.write_pgm(os.path.join(seq_dir, mp), mask)
        frame_paths.append(fp)
        mask_paths.append(mp)
    manifest = {
        "name": name,
        "width": spec.width,
        "height": spec.height,
        "frames": frame_paths,
        "first_frame_annotation": mask_paths[0],
        "gt_masks": mask_paths,
    }
    manifest_path = os.path.join(seq_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path
