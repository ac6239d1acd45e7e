"""Central-difference gradient verification.

Every hand-written backward pass in this package is checked against
numerical differentiation. The comparison uses a relative error with a
floor of one in the denominator, so tiny gradients are compared
absolutely and large ones relatively.
"""

from __future__ import annotations

from typing import Callable, Sequence, Tuple

import numpy as np

from .tensor import Tensor


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Return the worst relative error between analytic and numeric grads.

    ``fn`` must map the given tensors to a scalar Tensor. Inputs with
    ``requires_grad`` are perturbed element by element with a central
    difference of half-width ``eps``. The reported error is
    ``|a - n| / max(1, |a|, |n|)`` maximized over every element of every
    differentiable input.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar output, got shape {out.shape}")
    out.backward()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn(*inputs).data)
            flat[i] = keep - eps
            lo = float(fn(*inputs).data)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2.0 * eps)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    return worst


def assert_grads_close(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                       eps: float = 1e-5, tol: float = 1e-6) -> float:
    err = finite_diff_check(fn, inputs, eps=eps)
    if not err <= tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} > {tol:.1e}")
    return err
