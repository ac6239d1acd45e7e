"""Model parameters: deterministic initialization and checkpointing.

All weights live in one ordered name -> Tensor map so the optimizer,
the checkpoint writer, and the gradient checks can enumerate them
uniformly. Initialization draws from a single seeded generator in a
fixed order, so a seed fully determines every parameter.

Init conventions: the ViT branch draws from normal(0, 0.02), its CLS
token starts at zero, and layer-norm affines start at identity
(gamma 1, beta 0). Everything downstream of the encoder uses fan-in
scaled weights with zero biases, so unit-scale features stay at unit
scale through each projection; a flat 0.02 everywhere shrinks the
signal roughly 7x per layer and leaves the decoder staring at its own
bias terms. Deformable offset/weight projections start at zero with the
offset bias on a small per-head ring of fractional-texel displacements,
so sampling begins at a stable, off-lattice pattern. Query slot
embeddings draw at unit variance so the M slots differ from the start.
"""

from __future__ import annotations

import math
from typing import Dict, List, Tuple

import numpy as np

from .config import EngineConfig
from .errors import ConfigError
from .tensor import Tensor
from . import tensorio


class ModelWeights:
    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.tensors: Dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def parameters(self, freeze_vit: bool = False) -> List[Tuple[str, Tensor]]:
        out = []
        for name, t in self.tensors.items():
            if freeze_vit and name.startswith("encoder.vit."):
                continue
            out.append((name, t))
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    # ---- construction -------------------------------------------------

    @classmethod
    def init(cls, cfg: EngineConfig) -> "ModelWeights":
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        w = cls(cfg)
        c = cfg.channels

        def draw(name: str, *shape: int, std: float) -> Tensor:
            return w._add(name, rng.normal(0.0, std, size=shape))

        def vit_normal(name: str, *shape: int) -> Tensor:
            return draw(name, *shape, std=0.02)

        def linear(prefix: str, cin: int, cout: int) -> None:
            draw(prefix + ".weight", cin, cout, std=1.0 / math.sqrt(cin))
            w._add(prefix + ".bias", np.zeros(cout))

        def conv(prefix: str, cout: int, cin: int, relu: bool = True) -> None:
            fan = cin * 9
            std = math.sqrt(2.0 / fan) if relu else 1.0 / math.sqrt(fan)
            draw(prefix + ".weight", cout, cin, 3, 3, std=std)
            w._add(prefix + ".bias", np.zeros(cout))

        def ln(prefix: str, n: int = None) -> None:
            n = c if n is None else n
            w._add(prefix + ".gamma", np.ones(n))
            w._add(prefix + ".beta", np.zeros(n))

        def attn(prefix: str, vit: bool = False) -> None:
            for part in ("q", "k", "v", "o"):
                if vit:
                    vit_normal(f"{prefix}.w{part}", c, c)
                    vit_normal(f"{prefix}.b{part}", c)
                else:
                    draw(f"{prefix}.w{part}", c, c, std=1.0 / math.sqrt(c))
                    w._add(f"{prefix}.b{part}", np.zeros(c))

        # ViT branch
        vit_normal("encoder.vit.patch_embed.weight", cfg.patch * cfg.patch * 3, c)
        vit_normal("encoder.vit.patch_embed.bias", c)
        w._add("encoder.vit.cls", np.zeros(c))
        grid = cfg.base_size // cfg.patch
        vit_normal("encoder.vit.pos", c, grid, grid)
        for i in range(cfg.vit_blocks):
            ln(f"encoder.vit.block{i}.ln1")
            attn(f"encoder.vit.block{i}.attn", vit=True)
            ln(f"encoder.vit.block{i}.ln2")
            vit_normal(f"encoder.vit.block{i}.mlp.w1", c, 4 * c)
            vit_normal(f"encoder.vit.block{i}.mlp.b1", 4 * c)
            vit_normal(f"encoder.vit.block{i}.mlp.w2", 4 * c, c)
            vit_normal(f"encoder.vit.block{i}.mlp.b2", c)
        ln("encoder.vit.ln_final")

        # CNN pyramid: /2 stem then taps at /4, /8, /16; each stage
        # carries a per-location channel norm
        p0, p1, p2 = cfg.pyramid_channels
        chain = [(3, p0), (p0, p0), (p0, p1), (p1, p2)]
        for i, (cin, cout) in enumerate(chain):
            conv(f"encoder.pyramid.conv{i}", cout, cin)
            ln(f"encoder.pyramid.conv{i}.ln", cout)

        # fusion block(s)
        for d in range(cfg.fusion_depth):
            fp = "fusion" if d == 0 else f"fusion{d}"
            for lvl, cl in enumerate(cfg.pyramid_channels if d == 0 else [c, c, c]):
                linear(f"{fp}.semantic.proj{lvl}", cl, c)
            attn(f"{fp}.semantic.attn")
            ln(f"{fp}.semantic.ln")
            linear(f"{fp}.deform.value", c, c)
            n_off = cfg.deform_heads * 3 * cfg.deform_points
            w._add(f"{fp}.deform.offset.weight", np.zeros((c, n_off * 2)))
            w._add(f"{fp}.deform.offset.bias", _offset_ring(cfg.deform_heads, 3, cfg.deform_points))
            w._add(f"{fp}.deform.weight.weight", np.zeros((c, n_off)))
            w._add(f"{fp}.deform.weight.bias", np.zeros(n_off))
            linear(f"{fp}.deform.out", c, c)
            ln(f"{fp}.deform.ln")

        # memory key/value projections (applied to the fused stride-16 level)
        linear("memory.key", c, cfg.memory_key_channels)
        linear("memory.value", c + 1, cfg.memory_value_channels)

        # per-object target queries; unit-variance slots keep the M
        # queries distinct after the shared pooled descriptor is added
        draw("queries.slot", cfg.query_count, c, std=1.0)
        attn("queries.cross")
        ln("queries.cross.ln")
        attn("queries.selfattn")
        ln("queries.selfattn.ln")
        attn("queries.update")
        ln("queries.update.ln")

        # decoder: fused s4 + query readout + memory readout
        dc0 = 2 * c + cfg.memory_value_channels
        conv("decoder.conv0", c, dc0)
        conv("decoder.conv1", c // 2, c)
        conv("decoder.conv2", 1, c // 2, relu=False)
        return w

    # ---- persistence ---------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def save(self, path: str, extra_meta: dict = None) -> None:
        meta = {"kind": "weights", "config": self.cfg.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        tensorio.save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path: str) -> "ModelWeights":
        arrays, meta = tensorio.load_checkpoint(path)
        cfg = EngineConfig.from_dict(meta.get("config", {}))
        w = cls.init(cfg)
        missing = set(w.tensors) - set(arrays)
        surplus = set(arrays) - set(w.tensors)
        if missing or surplus:
            raise ConfigError(f"checkpoint tensor names disagree with the architecture: "
                              f"missing {sorted(missing)[:3]}, surplus {sorted(surplus)[:3]}")
        for name, arr in arrays.items():
            if arr.shape != w.tensors[name].data.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                  f"expected {w.tensors[name].data.shape}")
            w.tensors[name].data = np.ascontiguousarray(arr)
        return w

    def quantize(self) -> None:
        """Pass every parameter through float32, matching checkpoint precision."""
        for t in self.tensors.values():
            t.data = t.data.astype(np.float32).astype(np.float64)


def _offset_ring(heads: int, levels: int, points: int) -> np.ndarray:
    """Initial sampling displacements in texel units: one direction per
    head, growing fractional radii per point, shared across levels."""
    bias = np.zeros((heads, levels, points, 2))
    for h in range(heads):
        theta = 2.0 * math.pi * h / heads
        for p in range(points):
            r = 0.7 * (p + 1.5)  # fractional radii keep samples off the lattice
            bias[h, :, p, 0] = r * math.cos(theta)
            bias[h, :, p, 1] = r * math.sin(theta)
    return bias.reshape(-1)


