"""Finite-difference gradient checks for every differentiable tensorkit op.

Each case draws random shapes and inputs from a seed, builds a graph and
contracts its output with a fixed random cotangent R. The analytic gradient
comes from ``out.backward(R)``; the oracle is a central difference of
sum(out * R) accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensorkit as tk
from .tensorkit import Tensor


@dataclass
class CheckResult:
    op: str
    seed: int
    ok: bool
    max_abs_err: float
    shapes: list


def _r(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


def _dims(rng, n, lo=2, hi=4):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _attention_graph(x, w, wq, wk, wv, e):
    # conv -> norm -> single-token attention -> MSE, the U-Net's bottleneck in miniature
    h = tk.silu(tk.conv2d(x, w, stride=1, pad=1))
    h = tk.layer_norm(h, axis=(1, 2, 3))
    B, C, H, W = h.shape
    tok = h.reshape(B, C, H * W).transpose(0, 2, 1)
    q = tk.matmul(tok, wq)
    k = tk.matmul(e, wk).reshape(B, 2, -1).transpose(0, 2, 1)
    v = tk.matmul(e, wv).reshape(B, 2, -1)
    a = tk.softmax(tk.scale(tk.matmul(q, k), 0.5), axis=-1)
    out = tok + tk.matmul(a, v)
    return tk.mse(out, Tensor(np.full(out.shape, 0.1, dtype=np.float32)))


def _cases() -> dict[str, Callable]:
    def binary(fn):
        def build(rng):
            s = _dims(rng, int(rng.integers(1, 4)))
            return [_r(rng, *s), _r(rng, *s)], fn
        return build

    def bcast_add(rng):
        m, n = _dims(rng, 2)
        return [_r(rng, m, n), _r(rng, 1, n)], lambda a, b: a + b

    def matmul(rng):
        m, k, n = _dims(rng, 3, 2, 5)
        return [_r(rng, m, k), _r(rng, k, n)], tk.matmul

    def bmatmul(rng):
        b, m, k, n = _dims(rng, 4, 2, 3)
        return [_r(rng, b, m, k), _r(rng, k, n)], tk.matmul

    def conv(stride, narrow=False):
        def build(rng):
            B, C, O = _dims(rng, 3, 1, 3)
            if narrow:
                # fewer output than input channels takes a separate backward path
                C, O = O + 2, min(C, O)
            H = int(rng.integers(4, 7))
            return [_r(rng, B, C, H, H), _r(rng, O, C, 3, 3)], lambda x, w: tk.conv2d(x, w, stride=stride, pad=1)
        return build

    def unary(fn, lo=-2.0, hi=2.0):
        def build(rng):
            s = _dims(rng, int(rng.integers(1, 4)))
            return [_r(rng, *s, lo=lo, hi=hi)], fn
        return build

    def layer_norm(rng):
        B, C = _dims(rng, 2)
        H = int(rng.integers(2, 4))
        return [_r(rng, B, C, H, H)], lambda x: tk.layer_norm(x, axis=(1, 2, 3))

    def layer_norm_last(rng):
        m, n = _dims(rng, 2, 3, 6)
        return [_r(rng, m, n)], lambda x: tk.layer_norm(x, axis=-1)

    def cross_entropy(rng):
        m, n = _dims(rng, 2, 2, 5)
        labels = rng.integers(0, n, size=m)
        return [_r(rng, m, n, lo=-3, hi=3)], lambda x: tk.cross_entropy(x, labels)

    def reshape(rng):
        a, b, c = _dims(rng, 3)
        return [_r(rng, a, b, c)], lambda x: x.reshape(a * b, c)

    def transpose(rng):
        a, b, c = _dims(rng, 3)
        return [_r(rng, a, b, c)], lambda x: x.transpose(2, 0, 1)

    def concat(rng):
        m, n, k = _dims(rng, 3)
        return [_r(rng, m, n), _r(rng, m, k)], lambda a, b: tk.concat([a, b], axis=1)

    def slice_(rng):
        m, n = _dims(rng, 2, 3, 6)
        return [_r(rng, m, n)], lambda x: x[1:, : n - 1]

    def sum_axis(rng):
        m, n = _dims(rng, 2)
        return [_r(rng, m, n)], lambda x: x.sum(axis=1, keepdims=True)

    def mean_axis(rng):
        m, n, k = _dims(rng, 3)
        return [_r(rng, m, n, k)], lambda x: x.mean(axis=(0, 2))

    def mse(rng):
        s = _dims(rng, 2)
        return [_r(rng, *s), _r(rng, *s)], tk.mse

    def composite(rng):
        B, C = 2, 3
        x = _r(rng, B, 2, 4, 4)
        w = _r(rng, C, 2, 3, 3, lo=-0.5, hi=0.5)
        wq, wk, wv = _r(rng, C, 4), _r(rng, 5, 8), _r(rng, 5, 2 * C)
        e = _r(rng, B, 5)
        return [x, w, wq, wk, wv, e], _attention_graph

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "add_broadcast": bcast_add,
        "scale": unary(lambda x: tk.scale(x, -1.7)),
        "silu": unary(tk.silu, -3, 3),
        "matmul": matmul,
        "matmul_batched": bmatmul,
        "conv2d": conv(1),
        "conv2d_stride2": conv(2),
        "conv2d_narrow": conv(1, narrow=True),
        "layer_norm": layer_norm,
        "layer_norm_last": layer_norm_last,
        "softmax": unary(lambda x: tk.softmax(x, axis=-1), -3, 3),
        "log_softmax": unary(lambda x: tk.log_softmax(x, axis=-1), -3, 3),
        "cross_entropy": cross_entropy,
        "reshape": reshape,
        "transpose": transpose,
        "concat": concat,
        "slice": slice_,
        "sum": sum_axis,
        "mean": mean_axis,
        "mse": mse,
        "composite_conv_norm_attention_mse": composite,
    }


OP_CASES = _cases()


def check_op(name: str, seed: int, eps: float = 1e-2, rtol: float = 1e-2, atol: float = 1e-3) -> CheckResult:
    rng = np.random.default_rng([seed, 17])
    arrays, fn = OP_CASES[name](rng)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    R = rng.standard_normal(out.shape).astype(np.float32)
    out.backward(R)
    ok, worst = True, 0.0
    for i, leaf in enumerate(leaves):
        work = [a.copy() for a in arrays]

        def f() -> float:
            with tk.no_grad():
                o = fn(*[Tensor(w) for w in work])
            return float((o.data.astype(np.float64) * R).sum())

        numeric = tk.finite_difference_grad(f, work[i], eps=eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, float(np.abs(analytic - numeric).max()))
        ok &= tk.grad_close(analytic, numeric, rtol=rtol, atol=atol)
    return CheckResult(name, seed, bool(ok), worst, [list(a.shape) for a in arrays])


def check_all(seeds=range(5)) -> list[CheckResult]:
    return [check_op(name, s) for name in OP_CASES for s in seeds]
