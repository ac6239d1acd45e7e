"""Dense kernels with hand-written backward passes.

The kernels here are the whole numeric surface of the engine: matrix
multiply, softmax, layer norm, bilinear sampling, pooling, convolution
(via im2col), and a mirror-symmetric bilinear resize. Each backward is
exact and is verified against central differences in the test suite.

The resize builds its interpolation tables so that the right half of the
output axis reuses the left half's weights mirrored. That makes
``resize(flip(x)) == flip(resize(x))`` hold bitwise, which the inference
harness relies on for its flip-fusion consistency guarantee.
"""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from .errors import DimensionError, require_shape
from .tensor import Tensor, as_tensor

# fault-injection hook for the selftest mutation check: when set to
# "matmul-grad-sign" the matmul backward flips the sign of one gradient.
_FAULT: Optional[str] = None


def set_fault(name: Optional[str]) -> None:
    global _FAULT
    _FAULT = name


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; gradients are the usual transposes."""
    require_shape(a.ndim == 2 and b.ndim == 2,
                  f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    if m <= 16 and n <= 16 and k <= 16:
        # Small operands follow the textbook summation order (ascending k)
        # so results are bit-identical to a naive triple loop; the BLAS
        # path below may reorder the reduction.
        out_data = np.zeros((m, n))
        for t in range(k):
            out_data += np.multiply.outer(a.data[:, t], b.data[t, :])
    else:
        out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.T
            if _FAULT == "matmul-grad-sign":
                ga = -ga
            a.accumulate_grad(ga)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return Tensor.from_op(out_data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to one."""
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out_data * (g - inner))

    return Tensor.from_op(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    require_shape(gamma.shape == (n,) and beta.shape == (n,),
                  f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {n}")
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    return Tensor.from_op(out_data, (x, gamma, beta), backward)


def global_avg_pool(tokens: Tensor) -> Tensor:
    """Per-channel mean over the token axis of an [N, C] matrix."""
    require_shape(tokens.ndim == 2, f"global_avg_pool expects [N, C], got {tokens.shape}")
    if tokens.shape[0] == 0:
        raise DimensionError("global_avg_pool over zero tokens")
    return tokens.mean(axis=0)


def bilinear_sample_many(feature_map: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample a [C, H, W] map at K continuous (x, y) points -> [K, C].

    Coordinates clamp to the border, so out-of-range samples stay valid
    and the sampler remains a convex combination of four texels. The
    backward covers both the map and the coordinates (piecewise linear;
    zero slope outside the border).
    """
    require_shape(feature_map.ndim == 3, f"bilinear_sample expects [C, H, W], got {feature_map.shape}")
    c, h, w = feature_map.shape
    if h == 0 or w == 0:
        raise DimensionError(f"bilinear_sample on an empty map {feature_map.shape}")
    cx = np.clip(xs.data, 0.0, w - 1.0)
    cy = np.clip(ys.data, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0

    flat = feature_map.data.reshape(c, h * w)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    v00 = flat[:, i00]
    v01 = flat[:, i01]
    v10 = flat[:, i10]
    v11 = flat[:, i11]
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out_data = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).T  # [K, C]

    def backward(g):
        gt = g.T  # [C, K]
        if feature_map.requires_grad:
            grad = np.zeros_like(flat)
            np.add.at(grad.T, i00, (gt * w00).T)
            np.add.at(grad.T, i01, (gt * w01).T)
            np.add.at(grad.T, i10, (gt * w10).T)
            np.add.at(grad.T, i11, (gt * w11).T)
            feature_map.accumulate_grad(grad.reshape(c, h, w))
        if xs.requires_grad:
            dx = ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) * gt
            inside = (xs.data > 0.0) & (xs.data < w - 1.0)
            xs.accumulate_grad(dx.sum(axis=0) * inside)
        if ys.requires_grad:
            dy = ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) * gt
            inside = (ys.data > 0.0) & (ys.data < h - 1.0)
            ys.accumulate_grad(dy.sum(axis=0) * inside)

    return Tensor.from_op(np.asarray(out_data, order="C"), (feature_map, xs, ys), backward)


def bilinear_sample(feature_map: Tensor, x: float, y: float) -> Tensor:
    """Sample one point from a [C, H, W] map -> [C]; exact on the lattice."""
    out = bilinear_sample_many(feature_map, Tensor([float(x)]), Tensor([float(y)]))
    return out.reshape(feature_map.shape[0])


def take(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; backward scatters with add."""
    src = x.data.reshape(-1)
    out_data = src[flat_index]

    def backward(g):
        grad = np.zeros(x.data.size)
        np.add.at(grad, flat_index.reshape(-1), g.reshape(-1))
        x.accumulate_grad(grad.reshape(x.data.shape))

    return Tensor.from_op(np.asarray(out_data, order="C"), (x,), backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the trailing two axes of a [C, H, W] tensor."""
    if pad == 0:
        return x
    c, h, w = x.shape
    out_data = np.zeros((c, h + 2 * pad, w + 2 * pad))
    out_data[:, pad:pad + h, pad:pad + w] = x.data

    def backward(g):
        x.accumulate_grad(np.asarray(g[:, pad:pad + h, pad:pad + w], order="C"))

    return Tensor.from_op(out_data, (x,), backward)


_IM2COL_CACHE: dict = {}


def _im2col_index(cin: int, hp: int, wp: int, k: int, stride: int) -> Tuple[np.ndarray, int, int]:
    key = (cin, hp, wp, k, stride)
    hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    ii, jj = np.meshgrid(np.arange(h_out) * stride, np.arange(w_out) * stride, indexing="ij")
    base = (ii * wp + jj).reshape(-1)  # [T]
    ci, ki, kj = np.meshgrid(np.arange(cin), np.arange(k), np.arange(k), indexing="ij")
    offset = (ci * hp * wp + ki * wp + kj).reshape(-1)  # [Cin*k*k]
    idx = base[:, None] + offset[None, :]
    _IM2COL_CACHE[key] = (idx, h_out, w_out)
    return idx, h_out, w_out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution of [Cin, H, W] with [Cout, Cin, k, k] via im2col.

    With k=3 and padding=1 the output spatial size is ceil(H/stride) for
    stride 1 or 2, which is what the pyramid's stride arithmetic expects.
    """
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    require_shape(cin == cin_w, f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    require_shape(kh == kw, f"conv2d expects square kernels, got {weight.shape}")
    xp = pad2d(x, padding)
    idx, h_out, w_out = _im2col_index(cin, h + 2 * padding, w + 2 * padding, kh, stride)
    cols = take(xp, idx)  # [T, Cin*k*k]
    w2 = weight.reshape(cout, cin * kh * kw)
    y = matmul(cols, w2.T)  # [T, Cout]
    if bias is not None:
        y = y + bias
    return y.T.reshape(cout, h_out, w_out)


def _resize_tables(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Index/weight tables for one axis, mirrored so flips commute bitwise."""
    half = (n_out + 1) // 2
    j = np.arange(half)
    src = np.clip((j + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), max(n_in - 2, 0))
    f = src - i0
    i0_full = np.empty(n_out, dtype=np.intp)
    w0_full = np.empty(n_out)
    w1_full = np.empty(n_out)
    i0_full[:half] = i0
    w0_full[:half] = 1.0 - f
    w1_full[:half] = f
    m = n_out - 1 - np.arange(half, n_out)  # mirror source for the right half
    i0_full[half:] = max(n_in - 2, 0) - i0[m] if n_in > 1 else 0
    w0_full[half:] = f[m]
    w1_full[half:] = 1.0 - f[m]
    i1_full = np.minimum(i0_full + 1, n_in - 1)
    return i0_full, i1_full, w0_full, w1_full


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a [C, H, W] tensor to [C, out_h, out_w].

    Uses half-pixel-center sampling; same-size calls are exact identity.
    """
    require_shape(x.ndim == 3, f"resize_bilinear expects [C, H, W], got {x.shape}")
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be positive, got {(out_h, out_w)}")
    i0, i1, w0, w1 = _resize_tables(w, out_w)
    out = x[:, :, i0] * w0 + x[:, :, i1] * w1
    i0, i1, w0, w1 = _resize_tables(h, out_h)
    out = out[:, i0, :] * w0[None, :, None] + out[:, i1, :] * w1[None, :, None]
    return out


def block_mean(x: Tensor, factor: int) -> Tensor:
    """Average non-overlapping factor x factor blocks of a [C, H, W] tensor."""
    c, h, w = x.shape
    require_shape(h % factor == 0 and w % factor == 0,
                  f"block_mean factor {factor} must divide spatial dims {(h, w)}")
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of row vectors: [N, in] @ [in, out] + [out]."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    return y


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the interior only."""
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        x.accumulate_grad(g * mask)

    return Tensor.from_op(out_data, (x,), backward)
