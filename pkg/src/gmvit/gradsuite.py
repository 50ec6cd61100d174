"""Finite-difference suite over every differentiable op and the micro model.

Runs in float64. Each case is a scalar function of a few random leaves; the
whole-model cases use :func:`micro_config` for each variant.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Callable

import numpy as np

from .autodiff import Tensor, check_gradients, concat, stack, where
from .autodiff import functional as F
from .autodiff.gradcheck import GradCheckResult
from .model import GMViT, micro_config


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    def add(name, fn, leaves):
        cases.append((name, fn, leaves))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    add("matmul", lambda: (a @ b).sum(), [a, b])
    x, y, w = _leaf(rng, 3, 4), _leaf(rng, 1, 4), rng.normal(size=(3, 4))
    for kind in ("add", "sub", "mul"):
        add(f"elementwise.{kind}", lambda k=kind: (F.elementwise(x, y, k) * w).sum(), [x, y])
    p = Tensor(rng.random((3, 4)) + 0.5, requires_grad=True)
    add("div", lambda: ((x / p) * w).sum(), [x, p])
    add("power", lambda: ((p ** 1.5) * w).sum(), [p])
    add("exp_log", lambda: ((p.log() + x.exp()) * w).sum(), [x, p])
    for kind in ("relu", "sigmoid", "gelu"):
        add(f"activation.{kind}", lambda k=kind: (F.activation(x, k) * w).sum(), [x])
    add("softmax", lambda: (F.softmax_rows(x, 2.0) * w).sum(), [x])
    add("log_softmax", lambda: (F.log_softmax(x, 0.7) * w).sum(), [x])
    g, bb = _leaf(rng, 4), _leaf(rng, 4)
    add("layer_norm", lambda: (F.layer_norm(x, g, bb) * w).sum(), [x, g, bb])
    xb = _leaf(rng, 5, 4)
    wb = rng.normal(size=(5, 4))
    add("batch_norm", lambda: (F.batch_norm(xb, g, bb, np.zeros(4), np.ones(4), True) * wb).sum(), [xb, g, bb])
    xi = _leaf(rng, 2, 2, 6, 6)
    k, kb = _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    pc = rng.normal(size=(2, 3, 3, 3))
    add("conv2d", lambda: (F.conv2d(xi, k, kb, 2, 1) * pc).sum(), [xi, k, kb])
    pm = rng.normal(size=(2, 2, 3, 3))
    add("max_pool2d", lambda: (F.max_pool2d(xi, 3, 2, 1) * pm).sum(), [xi])
    pg = rng.normal(size=(2, 2))
    add("global_avg_pool2d", lambda: (F.global_avg_pool2d(xi) * pg).sum(), [xi])
    rows = _leaf(rng, 6, 4)
    mask = np.array([True, True, False, True, True, True])
    wm = rng.normal(size=4)
    add("max_over_set", lambda: (F.max_over_set(rows, 0, mask) * wm).sum(), [rows])
    rows3 = _leaf(rng, 2, 6, 4)
    assign = np.array([[0, 2, 0, 1, 2, 2], [1, 1, 0, 0, 0, 1]])  # segment 2 empty in the second sample
    ws = rng.normal(size=(2, 3, 4))
    add("segment_max", lambda: (F.segment_max(rows3, assign, 3)[0] * ws).sum(), [rows3])
    wl, bl = _leaf(rng, 4, 3), _leaf(rng, 3)
    wo = rng.normal(size=(3, 3))
    add("linear", lambda: (F.linear(x, wl, bl) * wo).sum(), [x, wl, bl])
    mw = rng.normal(size=(2, 3, 4))
    add("concat_stack_getitem", lambda: (stack([x, concat([x[:1], y, x[2:]])]) * mw).sum(), [x, y])
    sel = rng.random((3, 4)) > 0.5
    add("where", lambda: (where(sel, x, p) * w).sum(), [x, p])
    add("reshape_transpose", lambda: (x.reshape(4, 3).T * w).sum(), [x])
    add("mean", lambda: (x.mean(axis=0) * w[0]).sum() + x.mean(), [x])
    t, s = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    add("mse_loss", lambda: F.mse_loss(t, s), [t, s])
    add("cross_entropy", lambda: F.cross_entropy(s, labels), [s])
    add("kl_div", lambda: F.kl_div(F.softmax_rows(t), F.softmax_rows(s)), [t, s])
    add("kl_div_logits", lambda: F.kl_div_logits(t, s, 5.0), [t, s])
    return cases


def _model_cases(variants, rng):
    cases = []
    for v in variants:
        m = GMViT(micro_config(v), np.random.default_rng(1))
        x = rng.random((3, 4, 8, 8))
        pos = rng.normal(size=(4, 3))
        pos /= np.linalg.norm(pos, axis=1, keepdims=True)
        y = np.array([0, 1, 2])
        cases.append((f"model.{v}", lambda m=m, x=x, pos=pos, y=y: F.cross_entropy(m(x, pos).logits, y),
                      m.parameters()))
    return cases


def run_suite(variants=("teacher", "simple", "mini"), max_coords: int = 6, tol: float = 1e-3,
              seed: int = 0) -> tuple[list[GradCheckResult], float]:
    """All op cases plus one whole-model case per variant; returns (results, seconds)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, leaves in _op_cases(rng) + _model_cases(variants, rng):
        coords = max_coords if name.startswith("model.") else None
        err = check_gradients(fn, leaves, max_coords=coords, rng=np.random.default_rng(seed))
        n = sum(min(p.size, coords) if coords else p.size for p in leaves)
        results.append(GradCheckResult(name, err, n, tol))
    return results, time.perf_counter() - t0


@contextmanager
def sign_flip(rule: str = "sigmoid"):
    """Temporarily negate one backward rule, to show the suite catches it."""
    if rule != "sigmoid":
        raise ValueError(f"no mutation defined for {rule!r}")
    orig = F._sigmoid_grad
    F._sigmoid_grad = lambda out, g: -orig(out, g)
    try:
        yield
    finally:
        F._sigmoid_grad = orig
