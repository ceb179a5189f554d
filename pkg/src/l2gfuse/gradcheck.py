"""Analytic gradients of the core kernels checked against central differences.

Every check reduces an op to a scalar ``r . op(x)`` with a random projection
``r`` and compares the analytic vector-Jacobian product against the numeric
gradient of that scalar.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .attention import DeformAttnParams, deform_attn_batch
from .kernels import FeatureMap, ParamStore, bilinear_sample_many, ffn, linear, precision, softmax

__all__ = [
    "GradReport",
    "bilinear_grad",
    "check_gradients",
    "deform_attn_query_vjp",
    "ffn_vjp",
    "numeric_gradient",
    "relative_error",
    "softmax_vjp",
]

KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradReport:
    op: str
    max_rel_err: float
    max_abs_err: float
    probes: int
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.op:<22} probes={self.probes:<4d} max_rel={self.max_rel_err:.3e} "
                f"max_abs={self.max_abs_err:.3e} tol={self.tolerance:.0e} {status}")


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """(relative, absolute) error of one probe, infinity norms, denominator floored at 1e-8."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return diff / scale, diff


# ---------------------------------------------------------------------------
# Analytic vector-Jacobian products


def bilinear_grad(fm: FeatureMap, u: float, v: float, r: np.ndarray) -> np.ndarray:
    _, du, dv = bilinear_sample_many(fm, np.asarray(u), np.asarray(v), with_grad=True)
    return np.array([r @ du, r @ dv])


def softmax_vjp(x: np.ndarray, r: np.ndarray) -> np.ndarray:
    p = softmax(x)
    return p * (r - p @ r)


def softmax_jacobian(x: np.ndarray) -> np.ndarray:
    p = softmax(x)
    return np.diag(p) - np.outer(p, p)


def ffn_vjp(x: np.ndarray, params: ParamStore, prefix: str, r: np.ndarray) -> np.ndarray:
    pre = linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    g_hidden = (params[f"{prefix}.w2"].T @ r) * (pre > 0)
    return params[f"{prefix}.w1"].T @ g_hidden


def deform_attn_query_vjp(q: np.ndarray, fm: FeatureMap, ref: np.ndarray, p: DeformAttnParams,
                          r: np.ndarray) -> np.ndarray:
    """Gradient of ``r . deform_attn(q)`` with respect to the query.

    The query reaches the output through the sampling offsets (via the
    spatial gradient of the bilinear samples) and through the softmax
    attention weights.
    """
    _, cache = deform_attn_batch(q[None, :], fm, np.asarray(ref)[None, :], p, return_cache=True)
    A = cache["weights"][0]  # (M, K)
    values = cache["values"][0]  # (M, K, Cv)
    du, dv = cache["du"][0], cache["dv"][0]  # (M, K, C_I), per cell of offset

    g_head = np.einsum("mcv,c->mv", p.w_out, r)  # (M, Cv)
    g_A = np.einsum("mv,mkv->mk", g_head, values)
    g_values = A[..., None] * g_head[:, None, :]  # (M, K, Cv)
    g_sampled = np.einsum("mvc,mkv->mkc", p.w_value, g_values)
    g_off = np.stack([np.sum(g_sampled * du, axis=-1), np.sum(g_sampled * dv, axis=-1)], axis=-1)
    g_logits = A * (g_A - np.sum(A * g_A, axis=-1, keepdims=True))
    return p.w_offset.T @ g_off.reshape(-1) + p.w_attn.T @ g_logits.reshape(-1)


# ---------------------------------------------------------------------------
# Probe generation


def _near_lattice(cell_coord: np.ndarray) -> bool:
    frac = cell_coord - np.floor(cell_coord)
    return bool(np.any(np.minimum(frac, 1.0 - frac) < KINK_MARGIN))


def _random_feature_map(rng: np.random.Generator, h=7, w=9, c=5, stride=2.0) -> FeatureMap:
    return FeatureMap(rng.normal(size=(h, w, c)), stride=stride)


def random_deform_params(rng: np.random.Generator, query_dim: int, image_channels: int, heads: int, points: int,
                         head_dim: int = 3, offset_scale: float = 0.5) -> DeformAttnParams:
    return DeformAttnParams(
        w_out=rng.normal(size=(heads, query_dim, head_dim)) / math.sqrt(head_dim),
        w_value=rng.normal(size=(heads, head_dim, image_channels)) / math.sqrt(image_channels),
        w_offset=rng.normal(size=(2 * heads * points, query_dim)) * offset_scale,
        b_offset=rng.normal(size=2 * heads * points),
        w_attn=rng.normal(size=(heads * points, query_dim)),
        b_attn=rng.normal(size=heads * points),
    )


def _sample_cells(q: np.ndarray, fm: FeatureMap, ref: np.ndarray, p: DeformAttnParams) -> np.ndarray:
    _, cache = deform_attn_batch(q[None, :], fm, ref[None, :], p, return_cache=True)
    x = ref[0] / fm.stride - 0.5 + cache["offsets"][0, ..., 0]
    y = ref[1] / fm.stride - 0.5 + cache["offsets"][0, ..., 1]
    return np.concatenate([x.ravel(), y.ravel()])


def _run(op: str, probes: Iterable[tuple[np.ndarray, np.ndarray]], tol: float) -> GradReport:
    worst_rel = worst_abs = 0.0
    n = 0
    for analytic, numeric in probes:
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"{op}: non-finite analytic gradient at probe {n}")
        rel, ab = relative_error(analytic, numeric)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
        n += 1
    return GradReport(op, worst_rel, worst_abs, n, tol, worst_rel < tol)


def _bilinear_probes(rng, n, h):
    fm = _random_feature_map(rng)
    for _ in range(n):
        while True:
            cell = rng.uniform([-0.9, -0.9], [fm.width - 0.1, fm.height - 0.1])
            if not _near_lattice(cell):
                break
        u, v = (cell + 0.5) * fm.stride
        r = rng.normal(size=fm.channels)
        f = lambda x: float(r @ bilinear_sample_many(fm, np.asarray(x[0]), np.asarray(x[1])))
        yield bilinear_grad(fm, u, v, r), numeric_gradient(f, np.array([u, v]), h)


def _linear_probes(rng, n, h):
    for _ in range(n):
        m, k = rng.integers(2, 9, size=2)
        W, x, b, r = rng.normal(size=(m, k)), rng.normal(size=k), rng.normal(size=m), rng.normal(size=m)
        analytic = np.concatenate([W.T @ r, np.outer(r, x).ravel()])

        def f(z, m=m, k=k, b=b, r=r):
            return float(r @ linear(z[:k], z[k:].reshape(m, k), b))

        yield analytic, numeric_gradient(f, np.concatenate([x, W.ravel()]), h)


def _softmax_probes(rng, n, h):
    for _ in range(n):
        k = int(rng.integers(2, 17))
        x, r = rng.normal(size=k) * 2.0, rng.normal(size=k)
        yield softmax_vjp(x, r), numeric_gradient(lambda z: float(r @ softmax(z)), x, h)


def _ffn_probes(rng, n, h):
    for _ in range(n):
        n_in, n_out = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        hidden = 2 * n_in
        params = ParamStore({
            "f.w1": rng.normal(size=(hidden, n_in)), "f.b1": rng.normal(size=hidden),
            "f.w2": rng.normal(size=(n_out, hidden)), "f.b2": rng.normal(size=n_out),
        })
        r = rng.normal(size=n_out)
        while True:
            x = rng.normal(size=n_in)
            pre = linear(x, params["f.w1"], params["f.b1"])
            if np.min(np.abs(pre)) > KINK_MARGIN:
                break
        yield ffn_vjp(x, params, "f", r), numeric_gradient(lambda z: float(r @ ffn(z, params, "f")), x, h)


def _deform_probes(rng, n, h, heads=2, points=2):
    fm = _random_feature_map(rng)
    C = 6
    p = random_deform_params(rng, C, fm.channels, heads, points)
    for _ in range(n):
        r = rng.normal(size=C)
        while True:
            q = rng.normal(size=C) * 0.5
            ref = rng.uniform([0.0, 0.0], [fm.width * fm.stride, fm.height * fm.stride])
            if not _near_lattice(_sample_cells(q, fm, ref, p)):
                break
        f = lambda z: float(r @ deform_attn_batch(z[None, :], fm, ref[None, :], p)[0])
        yield deform_attn_query_vjp(q, fm, ref, p, r), numeric_gradient(f, q, h)


def check_gradients(seed: int = 0, probes: int = 32, tol: float = 1e-5, h: float = 1e-5) -> list[GradReport]:
    """Run every kernel check in 64-bit mode and return one report per op."""
    suites = [
        ("bilinear_sample", _bilinear_probes),
        ("linear", _linear_probes),
        ("softmax", _softmax_probes),
        ("ffn", _ffn_probes),
        ("deform_attn[query]", _deform_probes),
    ]
    reports = []
    with precision(64):
        for i, (name, gen) in enumerate(suites):
            rng = np.random.default_rng([seed, i])
            reports.append(_run(name, gen(rng, probes, h), tol))
    return reports


def timed_check(**kwargs) -> tuple[list[GradReport], float]:
    t0 = time.perf_counter()
    reports = check_gradients(**kwargs)
    return reports, time.perf_counter() - t0
