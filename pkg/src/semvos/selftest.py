"""Built-in verification suites.

Each suite re-derives expected values through an independent route
(dense enumeration, brute-force scans, simulation, finite differences)
and compares against the production code. The result is a JSON report
plus one pass/fail line per suite; any failure is a numerical failure
of the build.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import EngineConfig
from .encoder import FeaturePyramid
from .fusion import ms_deform_attn, reference_points
from .gradcheck import finite_diff_check
from .memory import MemoryBank, should_store
from .metrics import boundary_f, jaccard
from .queries import discriminative_select
from .tensor import Tensor
from . import oracles, ops

GRAD_TOL = 1e-6
ORACLE_TOL = 1e-9


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    max_error: float

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "cases": self.cases, "max_error": self.max_error}


def suite_matmul() -> SuiteResult:
    """Exact agreement with the in-order triple-loop product."""
    rng = np.random.default_rng(11)
    worst = 0.0
    cases = 0
    for _ in range(25):
        m, n, k = rng.integers(1, 7, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        got = ops.matmul(Tensor(a), Tensor(b)).data
        want = oracles.matmul_oracle(a, b)
        worst = max(worst, float(np.abs(got - want).max()))
        cases += 1
    return SuiteResult("matmul-oracle", worst == 0.0, cases, worst)


def _deform_setup(rng, c, heads, points, n_levels):
    """Random weights shared between the production call and the oracle."""
    names = {
        "value": (c, c), "offset": (c, heads * n_levels * points * 2),
        "weight": (c, heads * n_levels * points), "out": (c, c),
    }
    params = {}
    w = {}
    for key, (ci, co) in names.items():
        params[f"{key}.weight"] = rng.normal(scale=0.3, size=(ci, co))
        params[f"{key}.bias"] = rng.normal(scale=0.3, size=co)
        w[f"fusion.deform.{key}.weight"] = Tensor(params[f"{key}.weight"])
        w[f"fusion.deform.{key}.bias"] = Tensor(params[f"{key}.bias"])
    params["ln.gamma"] = rng.normal(loc=1.0, scale=0.1, size=c)
    params["ln.beta"] = rng.normal(scale=0.1, size=c)
    w["fusion.deform.ln.gamma"] = Tensor(params["ln.gamma"])
    w["fusion.deform.ln.beta"] = Tensor(params["ln.beta"])
    return params, w


def suite_deformable() -> SuiteResult:
    rng = np.random.default_rng(23)
    worst = 0.0
    cases = 0
    for heads in (1, 2):
        for points in (1, 2):
            for n_levels in (1, 2):
                c = 4 * heads
                shapes = [(int(rng.integers(2, 5)), int(rng.integers(2, 5)))
                          for _ in range(n_levels)]
                levels = [rng.normal(size=(c, h, wd)) for h, wd in shapes]
                params, w = _deform_setup(rng, c, heads, points, n_levels)
                refs = reference_points(shapes)
                queries = rng.normal(size=(refs.shape[0], c))
                cfg = EngineConfig(deform_heads=heads, deform_points=points, channels=c)
                pyr = FeaturePyramid(levels=[Tensor(lv) for lv in levels],
                                     strides=[4] * n_levels)
                got = ms_deform_attn(Tensor(queries), refs, pyr, w, cfg).data
                want = oracles.deform_attn_oracle(queries, refs, levels, params,
                                                  heads, points)
                worst = max(worst, float(np.abs(got - want).max()))
                cases += 1
    return SuiteResult("deformable-oracle", worst <= ORACLE_TOL, cases, worst)


def suite_memory_policy(streams: int = 100, frames: int = 60) -> SuiteResult:
    mism = 0
    for s in range(streams):
        rng = np.random.default_rng([31, s])
        capacity = int(rng.integers(2, 6))
        interval = int(rng.integers(1, 5))
        bank = MemoryBank(capacity=capacity, interval=interval)
        oracle = oracles.MemoryPolicyOracle(capacity=capacity, interval=interval)
        key = Tensor(np.zeros((2, 1, 1)))
        value = Tensor(np.zeros((3, 1, 1)))
        for t in range(frames):
            has_target = bool(rng.random() < 0.7) or t == 0
            deltas = rng.random(len(bank.entries)).tolist()
            for e, d in zip(bank.entries, deltas):
                e.usage += d
            oracle.observe(t, has_target, deltas)
            if should_store(t, has_target, interval):
                bank.store(key, value, t)
            if bank.stored_frames() != oracle.stored_frames():
                mism += 1
                break
    return SuiteResult("memory-policy", mism == 0, streams, float(mism))


def suite_metrics(pairs: int = 50, size: int = 32) -> SuiteResult:
    rng = np.random.default_rng(41)
    tol = 0.008 * float(np.sqrt(2.0)) * size
    worst = 0.0
    for _ in range(pairs):
        a = rng.random((size, size)) < rng.uniform(0.1, 0.9)
        b = rng.random((size, size)) < rng.uniform(0.1, 0.9)
        ej = abs(jaccard(a, b) - oracles.jaccard_oracle(a, b))
        ef = abs(boundary_f(a, b) - oracles.boundary_f_oracle(a, b, tol))
        worst = max(worst, float(ej), float(ef))
    return SuiteResult("metric-oracles", worst <= ORACLE_TOL, pairs, worst)


def suite_gradients() -> SuiteResult:
    rng = np.random.default_rng(53)
    worst = 0.0
    cases = 0

    def check(fn: Callable, arrays: List[np.ndarray]):
        nonlocal worst, cases
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        worst = max(worst, finite_diff_check(fn, inputs))
        cases += 1

    for _ in range(3):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        check(lambda a, b: ops.matmul(a, b).sum(), [a, b])
        x = rng.normal(size=(4, 5))
        check(lambda x: ops.softmax(x, axis=-1).sum(axis=0)[1], [x])
        g, bb = rng.normal(loc=1.0, scale=0.2, size=5), rng.normal(scale=0.2, size=5)
        check(lambda x, g, bb: (ops.layer_norm(x, g, bb) * ops.layer_norm(x, g, bb)).sum(),
              [x, g, bb])
        img = rng.normal(size=(2, 5, 5))
        k = rng.normal(scale=0.4, size=(3, 2, 3, 3))
        kb = rng.normal(scale=0.4, size=3)
        check(lambda i, k, kb: ops.conv2d(i, k, kb, stride=2, padding=1).sum(), [img, k, kb])
        check(lambda i: ops.resize_bilinear(i, 7, 3).sum(), [img])
    return SuiteResult("gradients", worst <= GRAD_TOL, cases, worst)


def suite_select(instances: int = 200) -> SuiteResult:
    rng = np.random.default_rng(67)
    mism = 0
    for i in range(instances):
        c, h, w = 4, int(rng.integers(1, 6)), int(rng.integers(1, 6))
        q = rng.normal(size=c)
        feat = rng.normal(size=(c, h, w))
        if i % 5 == 0:  # force ties: every column identical
            feat[:] = feat[:, :1, :1]
        (x, y), vec = discriminative_select(Tensor(q), Tensor(feat))
        ox, oy = oracles.argmax_scan_oracle(oracles.cosine_map_oracle(q, feat))
        if (x, y) != (ox, oy) or not np.array_equal(vec.data, feat[:, y, x]):
            mism += 1
    return SuiteResult("discriminative-select", mism == 0, instances, float(mism))


SUITES: List[Callable[[], SuiteResult]] = [
    suite_matmul, suite_deformable, suite_memory_policy,
    suite_metrics, suite_gradients, suite_select,
]


def run_suites(fault: Optional[str] = None) -> dict:
    """Run every suite; `fault` arms a deliberate defect first (mutation
    testing of the harness itself)."""
    ops.set_fault(fault)
    results = []
    try:
        for suite in SUITES:
            results.append(suite())
    finally:
        ops.set_fault(None)
    return {"suites": [r.to_dict() for r in results],
            "passed": all(r.passed for r in results)}


def print_report(report: dict, stream=None) -> None:
    stream = stream or sys.stderr
    for s in report["suites"]:
        tag = "PASS" if s["passed"] else "FAIL"
        print(f"{tag} {s['name']}: {s['cases']} cases, max error {s['max_error']:.3g}",
              file=stream)
