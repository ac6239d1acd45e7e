"""Semantic token encoder and CNN feature pyramid."""

import numpy as np
import pytest

from semvos import ops
from semvos.config import EngineConfig
from semvos.encoder import (FeaturePyramid, channel_norm, cnn_pyramid,
                            encode_frame, patch_embed, positional_embedding,
                            vit_forward)
from semvos.errors import ConfigError
from semvos.gradcheck import finite_diff_check
from semvos.tensor import Tensor
from semvos.weights import ModelWeights

from conftest import small_config


# ---- patch embedding -----------------------------------------------------------

def test_zero_image_tokens_equal_bias(tiny_cfg, tiny_weights):
    img = Tensor(np.zeros((3, 16, 16)))
    tokens = patch_embed(img, tiny_cfg.patch, tiny_weights)
    bias = tiny_weights["encoder.vit.patch_embed.bias"].data
    assert np.allclose(tokens.data, bias[None, :], atol=1e-15)


def test_patch_grid_arithmetic(tiny_cfg, tiny_weights):
    img = Tensor(np.zeros((3, 16, 16)))
    tokens = patch_embed(img, 8, tiny_weights)
    assert tokens.shape == (4, tiny_cfg.channels)


def test_single_pixel_touches_one_token(tiny_cfg, tiny_weights, rng):
    base = patch_embed(Tensor(np.zeros((3, 16, 16))), 8, tiny_weights).data
    img = np.zeros((3, 16, 16))
    img[1, 3, 11] = 1.0  # patch row 0, patch col 1 -> token 1
    tokens = patch_embed(Tensor(img), 8, tiny_weights).data
    differs = np.any(tokens != base, axis=1)
    assert differs.tolist() == [False, True, False, False]


def test_indivisible_image_rejected(tiny_weights):
    with pytest.raises(ConfigError, match="divisible"):
        patch_embed(Tensor(np.zeros((3, 20, 16))), 8, tiny_weights)


# ---- ViT forward ---------------------------------------------------------------

def test_vit_output_shapes(tiny_cfg, tiny_weights, rng):
    tokens = Tensor(rng.normal(size=(4, tiny_cfg.channels)))
    sem = vit_forward(tokens, tiny_weights, tiny_cfg, (2, 2))
    assert sem.patches.shape == (4, tiny_cfg.channels)
    assert sem.cls.shape == (tiny_cfg.channels,)
    assert sem.gap.shape == (tiny_cfg.channels,)
    assert sem.grid == (2, 2)


def test_vit_attention_rows_normalized(tiny_cfg, tiny_weights, rng):
    tokens = Tensor(rng.normal(size=(4, tiny_cfg.channels)))
    sink = []
    vit_forward(tokens, tiny_weights, tiny_cfg, (2, 2), attn_sink=sink)
    assert len(sink) == tiny_cfg.vit_blocks * tiny_cfg.vit_heads
    for probs in sink:
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(probs >= 0.0)


def test_gap_recomputable_from_patches(tiny_cfg, tiny_weights, rng):
    tokens = Tensor(rng.normal(size=(4, tiny_cfg.channels)))
    sem = vit_forward(tokens, tiny_weights, tiny_cfg, (2, 2))
    assert np.allclose(sem.gap.data, ops.global_avg_pool(sem.patches).data,
                       atol=1e-9)


def test_vit_token_permutation_equivariance(tiny_cfg, tiny_weights, rng):
    """Swapping two patch tokens with their positions swaps the outputs."""
    tokens = rng.normal(size=(4, tiny_cfg.channels))
    pos = positional_embedding(tiny_weights, (2, 2)).data
    sem = vit_forward(Tensor(tokens), tiny_weights, tiny_cfg, (2, 2),
                      pos=Tensor(pos))
    perm = [0, 2, 1, 3]
    sem_p = vit_forward(Tensor(tokens[perm]), tiny_weights, tiny_cfg, (2, 2),
                        pos=Tensor(pos[perm]))
    assert np.allclose(sem_p.patches.data, sem.patches.data[perm], atol=1e-9)
    assert np.allclose(sem_p.cls.data, sem.cls.data, atol=1e-9)
    assert np.allclose(sem_p.gap.data, sem.gap.data, atol=1e-9)


def test_vit_grid_mismatch(tiny_cfg, tiny_weights):
    from semvos.errors import DimensionError
    with pytest.raises(DimensionError, match="grid"):
        vit_forward(Tensor(np.zeros((4, tiny_cfg.channels))), tiny_weights,
                    tiny_cfg, (3, 2))


def test_vit_bit_deterministic(tiny_cfg, tiny_weights, rng):
    tokens = Tensor(rng.normal(size=(4, tiny_cfg.channels)))
    a = vit_forward(tokens, tiny_weights, tiny_cfg, (2, 2))
    b = vit_forward(tokens, tiny_weights, tiny_cfg, (2, 2))
    assert np.array_equal(a.cls.data, b.cls.data)
    assert np.array_equal(a.patches.data, b.patches.data)


# ---- CNN pyramid ---------------------------------------------------------------

def test_pyramid_stride_shapes(tiny_cfg, tiny_weights):
    img = Tensor(np.zeros((3, 64, 64)))
    pyr = cnn_pyramid(img, tiny_weights, tiny_cfg)
    c1, c2, c3 = tiny_cfg.pyramid_channels
    assert [lvl.shape for lvl in pyr.levels] == [
        (c1, 16, 16), (c2, 8, 8), (c3, 4, 4)]
    assert pyr.strides == (4, 8, 16)


def test_zero_image_zero_bias_gives_zero_pyramid(tiny_cfg):
    w = ModelWeights.init(small_config())
    for i in range(4):
        w[f"encoder.pyramid.conv{i}.bias"].data[:] = 0.0
        w[f"encoder.pyramid.conv{i}.ln.beta"].data[:] = 0.0
    pyr = cnn_pyramid(Tensor(np.zeros((3, 32, 32))), w, tiny_cfg)
    for lvl in pyr.levels:
        assert np.array_equal(lvl.data, np.zeros(lvl.shape))


def test_pyramid_shift_equivariance(tiny_cfg, tiny_weights, rng):
    """A 4-pixel translation moves the stride-4 map by one texel inside."""
    img = rng.normal(size=(3, 32, 32))
    shifted = np.zeros_like(img)
    shifted[:, :, 4:] = img[:, :, :-4]
    m1 = cnn_pyramid(Tensor(img), tiny_weights, tiny_cfg).levels[0].data
    m2 = cnn_pyramid(Tensor(shifted), tiny_weights, tiny_cfg).levels[0].data
    assert np.allclose(m2[:, 1:-1, 2:-1], m1[:, 1:-1, 1:-2], atol=1e-12)


def test_pyramid_undersized_image(tiny_cfg, tiny_weights):
    with pytest.raises(ConfigError, match="16x16"):
        cnn_pyramid(Tensor(np.zeros((3, 8, 8))), tiny_weights, tiny_cfg)


def test_channel_norm_location_independent(rng):
    """Per-location normalization: each column is normalized on its own."""
    x = rng.normal(size=(5, 3, 4))
    gamma, beta = Tensor(np.ones(5)), Tensor(np.zeros(5))
    out = channel_norm(Tensor(x), gamma, beta).data
    for i in range(3):
        for j in range(4):
            col = x[:, i, j]
            expect = (col - col.mean()) / np.sqrt(col.var() + 1e-5)
            assert np.allclose(out[:, i, j], expect, atol=1e-12)


# ---- full encoder --------------------------------------------------------------

def test_encode_frame_shapes(tiny_cfg, tiny_weights, rng):
    img = Tensor(rng.normal(size=(3, 32, 32)))
    sem, pyr = encode_frame(img, tiny_weights, tiny_cfg)
    assert sem.patches.shape == (16, tiny_cfg.channels)
    assert sem.grid == (4, 4)
    assert len(pyr.levels) == 3
    for lvl in pyr.levels:
        assert np.isfinite(lvl.data).all()


def test_encoder_backward_matches_finite_differences(tiny_cfg, tiny_weights, rng):
    img = Tensor(rng.normal(size=(3, 16, 16)) * 0.5, requires_grad=True)
    v_cls = rng.normal(size=tiny_cfg.channels)
    v_lvl = [rng.normal(size=s) for s in [(4, 4, 4), (6, 2, 2), (8, 1, 1)]]

    def loss(image):
        sem, pyr = encode_frame(image, tiny_weights, tiny_cfg)
        total = (sem.cls * Tensor(v_cls)).sum() + sem.gap.sum()
        for lvl, v in zip(pyr.levels, v_lvl):
            total = total + (lvl * Tensor(v)).sum()
        return total

    assert finite_diff_check(loss, [img]) <= 1e-6
