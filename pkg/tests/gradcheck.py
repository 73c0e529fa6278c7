"""Central finite-difference checks for every autodiff kernel.

Each case draws fresh float64 inputs, reduces the kernel output to a scalar
with a random weighting ``sum(w * out)`` and compares the tape gradient of
every differentiable input with a central difference taken entry by entry.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from spul import autodiff as ad
from spul.autodiff import Tensor

EPS = 1e-5
TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(fn: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative gradient error of ``fn`` over all its inputs."""
    w = None

    def scalar(values):
        nonlocal w
        out = fn(*[Tensor(v) for v in values]).data
        if w is None:
            w = rng.normal(size=out.shape)
        return float(np.sum(w * out))

    scalar(arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward(np.broadcast_to(w, out.shape).copy())
    worst = 0.0
    for k, t in enumerate(ts):
        numeric = np.zeros_like(arrays[k])
        for idx in np.ndindex(arrays[k].shape):
            hi = [a.copy() for a in arrays]
            lo = [a.copy() for a in arrays]
            hi[k][idx] += EPS
            lo[k][idx] -= EPS
            numeric[idx] = (scalar(hi) - scalar(lo)) / (2 * EPS)
        analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _n(rng, *shape):
    return rng.normal(size=shape)


# name -> builder(rng) returning (fn, input arrays)
KERNELS: dict[str, Callable] = {
    "add": lambda r: (ad.add, [_n(r, 3, 4), _n(r, 4)]),
    "sub": lambda r: (lambda a, b: a - b, [_n(r, 3, 4), _n(r, 3, 4)]),
    "neg": lambda r: (lambda a: -a, [_n(r, 5)]),
    "mul": lambda r: (ad.mul, [_n(r, 2, 3, 4), _n(r, 1, 4)]),
    "scale": lambda r: (lambda a: ad.scale(a, 0.37), [_n(r, 3, 3)]),
    "gelu": lambda r: (ad.gelu, [2 * _n(r, 4, 5)]),
    "sum": lambda r: (lambda a: ad.tsum(a, axis=1), [_n(r, 3, 4, 2)]),
    "sum_keepdims": lambda r: (lambda a: ad.tsum(a, axis=-1, keepdims=True), [_n(r, 3, 4)]),
    "mean": lambda r: (lambda a: ad.mean(a, axis=0), [_n(r, 4, 3)]),
    "reshape": lambda r: (lambda a: ad.reshape(a, (6, 2)), [_n(r, 3, 4)]),
    "transpose": lambda r: (lambda a: ad.transpose(a, (2, 0, 1)), [_n(r, 2, 3, 4)]),
    "concat_rows": lambda r: (lambda a, b: ad.concat_rows([a, b], axis=1), [_n(r, 2, 3, 4), _n(r, 2, 2, 4)]),
    "take_rows": lambda r: (lambda a: ad.take_rows(a, np.array([2, 0, 3])), [_n(r, 3, 4, 5)]),
    "select": lambda r: (lambda a: ad.select(a, np.array([1, 1, 0, 3]), axis=1), [_n(r, 2, 4, 3)]),
    "embedding_lookup": lambda r: (lambda t: ad.embedding_lookup(t, np.array([[0, 4], [4, 2]])), [_n(r, 5, 3)]),
    "matmul": lambda r: (ad.matmul, [_n(r, 3, 4), _n(r, 4, 2)]),
    "matmul_batched": lambda r: (ad.matmul, [_n(r, 2, 3, 4), _n(r, 4, 5)]),
    "layer_norm": lambda r: (lambda a, w, b: ad.layer_norm(a, w, b), [_n(r, 3, 6), _n(r, 6), _n(r, 6)]),
    "softmax": lambda r: (lambda a: ad.softmax(a, axis=-1), [_n(r, 3, 5)]),
    "softmax_axis0": lambda r: (lambda a: ad.softmax(a, axis=0), [_n(r, 4, 3)]),
    "log_softmax": lambda r: (lambda a: ad.log_softmax(a, axis=-1), [_n(r, 3, 5)]),
    "masked_fill": lambda r: (lambda a: ad.masked_fill(a, np.triu(np.ones((4, 4), bool), 1), -3.0), [_n(r, 4, 4)]),
    "cross_entropy": lambda r: (lambda a: ad.cross_entropy(a, np.array([0, 4, 2])), [_n(r, 3, 5)]),
    "cross_entropy_sum": lambda r: (lambda a: ad.cross_entropy(a, np.array([1, 1]), reduction="sum"), [_n(r, 2, 3)]),
    # the reference side of KL is a constant by design
    "kl_divergence": lambda r: (lambda a, q=_n(r, 4, 5): ad.kl_divergence(a, q), [_n(r, 4, 5)]),
}


def run_all(seed: int = 0, points: int = 5) -> dict[str, float]:
    """Worst relative error per kernel over ``points`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, build in KERNELS.items():
        errs = []
        for _ in range(points):
            fn, arrays = build(rng)
            errs.append(check(fn, arrays, rng))
        worst[name] = max(errs)
    return worst
