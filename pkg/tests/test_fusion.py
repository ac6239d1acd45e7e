"""Semantic prior fusion and multi-scale deformable attention."""

import numpy as np
import pytest

from semvos import ops
from semvos.config import EngineConfig
from semvos.encoder import FeaturePyramid, SemanticTokens, encode_frame
from semvos.errors import ConfigError, DimensionError
from semvos.fusion import (fuse, ms_deform_attn, reference_points,
                           semantic_prior_fusion)
from semvos.gradcheck import finite_diff_check
from semvos.oracles import deform_attn_oracle, two_key_attention_oracle
from semvos.tensor import Tensor
from semvos.weights import ModelWeights

from conftest import small_config


def np_ln(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def make_tokens(cfg, rng) -> SemanticTokens:
    c = cfg.channels
    patches = Tensor(rng.normal(size=(4, c)))
    return SemanticTokens(cls=Tensor(rng.normal(size=c)),
                          gap=Tensor(rng.normal(size=c)),
                          patches=patches, grid=(2, 2))


def make_pyramid(cfg, rng, shapes=((4, 4), (2, 2), (1, 1))) -> FeaturePyramid:
    levels = [Tensor(rng.normal(size=(cl, h, w)))
              for cl, (h, w) in zip(cfg.pyramid_channels, shapes)]
    return FeaturePyramid(levels=levels)


# ---- reference points ------------------------------------------------------------

def test_reference_points_texel_centers():
    refs = reference_points([(2, 2)])
    assert refs.shape == (4, 2)
    assert np.allclose(refs, [[0.25, 0.25], [0.75, 0.25],
                              [0.25, 0.75], [0.75, 0.75]])
    assert refs.min() >= 0.0 and refs.max() <= 1.0


def test_reference_points_multi_level():
    refs = reference_points([(2, 3), (1, 1)])
    assert refs.shape == (7, 2)
    assert np.allclose(refs[-1], [0.5, 0.5])


# ---- semantic prior fusion --------------------------------------------------------

def test_semantic_zero_out_proj_is_residual_identity(tiny_cfg, rng):
    w = ModelWeights.init(small_config())
    w["fusion.semantic.attn.wo"].data[:] = 0.0
    w["fusion.semantic.attn.bo"].data[:] = 0.0
    pyr = make_pyramid(tiny_cfg, rng)
    out = semantic_prior_fusion(pyr, make_tokens(tiny_cfg, rng), w, tiny_cfg)
    for lvl, level in enumerate(pyr.levels):
        cl, h, wd = level.shape
        toks = level.data.reshape(cl, h * wd).T
        q = toks @ w[f"fusion.semantic.proj{lvl}.weight"].data \
            + w[f"fusion.semantic.proj{lvl}.bias"].data
        expect = np_ln(q, w["fusion.semantic.ln.gamma"].data,
                       w["fusion.semantic.ln.beta"].data)
        got = out.levels[lvl].data.reshape(tiny_cfg.channels, h * wd).T
        assert np.allclose(got, expect, atol=1e-12)


def test_semantic_equal_tokens_attend_half_half(tiny_cfg, tiny_weights, rng):
    tok = make_tokens(tiny_cfg, rng)
    tok = SemanticTokens(cls=tok.cls, gap=tok.cls, patches=tok.patches,
                         grid=tok.grid)
    sink = []
    semantic_prior_fusion(make_pyramid(tiny_cfg, rng), tok, tiny_weights,
                          tiny_cfg, attn_sink=sink)
    assert len(sink) == 3  # one single-head matrix per level
    for probs in sink:
        assert np.array_equal(probs, np.full(probs.shape, 0.5))


def test_semantic_single_texel_matches_two_key_oracle(tiny_cfg, tiny_weights, rng):
    c = tiny_cfg.channels
    level = Tensor(rng.normal(size=(tiny_cfg.pyramid_channels[0], 1, 1)))
    pyr = FeaturePyramid(levels=[level])
    tok = make_tokens(tiny_cfg, rng)
    out = semantic_prior_fusion(pyr, tok, tiny_weights, tiny_cfg)

    w = tiny_weights
    q = level.data.reshape(-1, 1).T @ w["fusion.semantic.proj0.weight"].data \
        + w["fusion.semantic.proj0.bias"].data
    kv = np.stack([tok.cls.data, tok.gap.data])
    att = two_key_attention_oracle(
        q, kv, kv,
        w["fusion.semantic.attn.wq"].data, w["fusion.semantic.attn.bq"].data,
        w["fusion.semantic.attn.wk"].data, w["fusion.semantic.attn.bk"].data,
        w["fusion.semantic.attn.wv"].data, w["fusion.semantic.attn.bv"].data,
        w["fusion.semantic.attn.wo"].data, w["fusion.semantic.attn.bo"].data)
    expect = np_ln(q + att, w["fusion.semantic.ln.gamma"].data,
                   w["fusion.semantic.ln.beta"].data)
    assert np.allclose(out.levels[0].data.reshape(c), expect[0], atol=1e-9)


def test_semantic_rejects_wrong_token_width(tiny_cfg, tiny_weights, rng):
    tok = make_tokens(tiny_cfg, rng)
    bad = SemanticTokens(cls=Tensor(np.zeros(tiny_cfg.channels + 1)),
                         gap=tok.gap, patches=tok.patches, grid=tok.grid)
    with pytest.raises(ConfigError):
        semantic_prior_fusion(make_pyramid(tiny_cfg, rng), bad, tiny_weights,
                              tiny_cfg)


# ---- deformable attention ---------------------------------------------------------

def deform_dict(rng, c, heads, points, levels, scale=0.3):
    """Standalone weight table shaped for an arbitrary level count."""
    sizes = {"value": (c, c), "offset": (c, heads * levels * points * 2),
             "weight": (c, heads * levels * points), "out": (c, c)}
    params, w = {}, {}
    for key, (ci, co) in sizes.items():
        params[f"{key}.weight"] = rng.normal(scale=scale, size=(ci, co))
        params[f"{key}.bias"] = rng.normal(scale=scale, size=co)
        w[f"fusion.deform.{key}.weight"] = Tensor(params[f"{key}.weight"])
        w[f"fusion.deform.{key}.bias"] = Tensor(params[f"{key}.bias"])
    params["ln.gamma"] = np.ones(c)
    params["ln.beta"] = np.zeros(c)
    w["fusion.deform.ln.gamma"] = Tensor(params["ln.gamma"])
    w["fusion.deform.ln.beta"] = Tensor(params["ln.beta"])
    return params, w


def test_deform_degenerate_equals_plain_sampling(rng):
    """P=1, one level, one head, zero offsets: sampling at the anchor."""
    c, h, wd = 4, 3, 5
    params, w = deform_dict(rng, c, heads=1, points=1, levels=1)
    w["fusion.deform.offset.weight"].data[:] = 0.0
    w["fusion.deform.offset.bias"].data[:] = 0.0
    w["fusion.deform.value.weight"].data[:] = np.eye(c)
    w["fusion.deform.value.bias"].data[:] = 0.0
    w["fusion.deform.out.weight"].data[:] = np.eye(c)
    w["fusion.deform.out.bias"].data[:] = 0.0

    level = rng.normal(size=(c, h, wd))
    pyr = FeaturePyramid(levels=[Tensor(level)], strides=[4])
    refs = reference_points([(h, wd)])
    queries = rng.normal(size=(refs.shape[0], c))
    cfg = EngineConfig(deform_heads=1, deform_points=1, channels=c)
    out = ms_deform_attn(Tensor(queries), refs, pyr, w, cfg).data

    # anchors sit on texel centers, so the bilinear sample is the texel itself
    samples = level.reshape(c, h * wd).T
    expect = np_ln(queries + samples, np.ones(c), np.zeros(c))
    assert np.allclose(out, expect, atol=1e-9)


def test_deform_attention_weights_sum_to_one(rng):
    c = 4
    _, w = deform_dict(rng, c, heads=2, points=3, levels=2)
    shapes = [(3, 3), (2, 2)]
    pyr = FeaturePyramid(levels=[Tensor(rng.normal(size=(c, h, wd)))
                                 for h, wd in shapes], strides=[4, 8])
    refs = reference_points(shapes)
    cfg = EngineConfig(deform_heads=2, deform_points=3, channels=c)
    sink = []
    ms_deform_attn(Tensor(rng.normal(size=(refs.shape[0], c))), refs, pyr, w,
                   cfg, attn_sink=sink)
    probs = sink[0]
    assert probs.shape == (refs.shape[0], 2, 6)
    assert np.all(probs >= 0.0)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)


def test_deform_matches_dense_oracle_single_level(rng):
    c, heads, points = 4, 1, 2
    shapes = [(4, 4)]
    params, w = deform_dict(rng, c, heads, points, len(shapes))
    levels = [rng.normal(size=(c, h, wd)) for h, wd in shapes]
    pyr = FeaturePyramid(levels=[Tensor(lv) for lv in levels], strides=[4])
    refs = reference_points(shapes)
    queries = rng.normal(size=(refs.shape[0], c))
    cfg = EngineConfig(deform_heads=heads, deform_points=points, channels=c)
    got = ms_deform_attn(Tensor(queries), refs, pyr, w, cfg).data
    want = deform_attn_oracle(queries, refs, levels, params, heads, points)
    assert np.abs(got - want).max() <= 1e-9


def test_deform_matches_dense_oracle_three_levels(rng):
    c, heads, points = 8, 2, 4
    shapes = [(5, 4), (3, 2), (2, 2)]
    params, w = deform_dict(rng, c, heads, points, len(shapes))
    levels = [rng.normal(size=(c, h, wd)) for h, wd in shapes]
    pyr = FeaturePyramid(levels=[Tensor(lv) for lv in levels], strides=[4, 8, 16])
    refs = reference_points(shapes)
    queries = rng.normal(size=(refs.shape[0], c))
    cfg = EngineConfig(deform_heads=heads, deform_points=points, channels=c)
    got = ms_deform_attn(Tensor(queries), refs, pyr, w, cfg).data
    want = deform_attn_oracle(queries, refs, levels, params, heads, points)
    assert np.abs(got - want).max() <= 1e-9


def test_deform_shape_errors(tiny_cfg, tiny_weights, rng):
    c = tiny_cfg.channels
    pyr = FeaturePyramid(levels=[Tensor(rng.normal(size=(c, 2, 2)))])
    with pytest.raises(DimensionError, match="reference"):
        ms_deform_attn(Tensor(rng.normal(size=(4, c))), np.zeros((3, 2)),
                       pyr, tiny_weights, tiny_cfg)
    bad = FeaturePyramid(levels=[Tensor(rng.normal(size=(c + 1, 2, 2)))])
    with pytest.raises(DimensionError, match="channel"):
        ms_deform_attn(Tensor(rng.normal(size=(4, c))),
                       reference_points([(2, 2)]), bad, tiny_weights, tiny_cfg)


# ---- composed fuse ----------------------------------------------------------------

def test_fuse_composition_regression(tiny_cfg, tiny_weights, rng):
    from semvos.fusion import _to_map, _to_tokens
    from semvos.tensor import concat
    pyr = make_pyramid(tiny_cfg, rng)
    tok = make_tokens(tiny_cfg, rng)
    out = fuse(pyr, tok, tiny_weights, tiny_cfg)

    sem = semantic_prior_fusion(pyr, tok, tiny_weights, tiny_cfg)
    shapes = [(lv.shape[1], lv.shape[2]) for lv in sem.levels]
    queries = concat([_to_tokens(lv) for lv in sem.levels], axis=0)
    fusedq = ms_deform_attn(queries, reference_points(shapes), sem,
                            tiny_weights, tiny_cfg)
    start = 0
    for lvl, (h, wd) in enumerate(shapes):
        expect = _to_map(fusedq[start:start + h * wd, :], h, wd)
        assert np.array_equal(out.levels[lvl].data, expect.data)
        start += h * wd


def test_fuse_preserves_shapes(tiny_cfg, tiny_weights, rng):
    img = Tensor(rng.normal(size=(3, 32, 32)))
    sem, pyr = encode_frame(img, tiny_weights, tiny_cfg)
    out = fuse(pyr, sem, tiny_weights, tiny_cfg)
    assert out.strides == pyr.strides
    c = tiny_cfg.channels
    assert [lv.shape for lv in out.levels] == [(c, 8, 8), (c, 4, 4), (c, 2, 2)]
    for lv in out.levels:
        assert np.isfinite(lv.data).all()


def test_fuse_backward_matches_finite_differences(tiny_cfg, tiny_weights, rng):
    levels = [Tensor(rng.normal(size=(cl, h, w)), requires_grad=True)
              for cl, (h, w) in zip(tiny_cfg.pyramid_channels,
                                    [(4, 4), (2, 2), (1, 1)])]
    cls = Tensor(rng.normal(size=tiny_cfg.channels), requires_grad=True)
    gap = Tensor(rng.normal(size=tiny_cfg.channels), requires_grad=True)
    vs = [rng.normal(size=(tiny_cfg.channels, h, w))
          for h, w in [(4, 4), (2, 2), (1, 1)]]

    def loss(l0, l1, l2, c_, g_):
        tok = SemanticTokens(cls=c_, gap=g_, patches=Tensor(np.zeros((4, 8))),
                             grid=(2, 2))
        out = fuse(FeaturePyramid(levels=[l0, l1, l2]), tok, tiny_weights,
                   tiny_cfg)
        total = None
        for lv, v in zip(out.levels, vs):
            term = (lv * Tensor(v)).sum()
            total = term if total is None else total + term
        return total

    assert finite_diff_check(loss, [*levels, cls, gap]) <= 1e-6
