"""Deformable cross-attention onto image features and a single-head encoder layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import (
    FeatureMap,
    ParamStore,
    bilinear_sample_many,
    ffn,
    ffn_param_spec,
    get_dtype,
    layer_norm,
    linear,
    softmax,
)

__all__ = [
    "DeformAttnParams",
    "deform_attn",
    "deform_attn_batch",
    "deform_attn_param_spec",
    "encoder_param_spec",
    "self_attn_layer",
]


def deform_attn_param_spec(prefix: str, query_dim: int, image_channels: int, heads: int, points: int,
                           head_dim: int | None = None):
    head_dim = head_dim or max(1, query_dim // heads)
    return [
        (f"{prefix}.w_out", (heads, query_dim, head_dim)),
        (f"{prefix}.w_value", (heads, head_dim, image_channels)),
        (f"{prefix}.sampling.offset", (2 * heads * points, query_dim)),
        (f"{prefix}.sampling_bias.offset", (2 * heads * points,)),
        (f"{prefix}.w_attn", (heads * points, query_dim)),
        (f"{prefix}.b_attn", (heads * points,)),
    ]


@dataclass(frozen=True)
class DeformAttnParams:
    """Per-head output/value projections plus the offset and weight heads.

    ``w_out[m]`` is C x C_v, ``w_value[m]`` is C_v x C_I. Offsets come out in
    feature-map cell units, laid out as (head, point, xy).
    """

    w_out: np.ndarray
    w_value: np.ndarray
    w_offset: np.ndarray
    b_offset: np.ndarray
    w_attn: np.ndarray
    b_attn: np.ndarray

    def __post_init__(self) -> None:
        M, C, Cv = self.w_out.shape
        if self.w_value.shape[:2] != (M, Cv):
            raise ValueError(f"w_value shape {self.w_value.shape} does not match w_out {self.w_out.shape}")
        if self.w_attn.shape[0] % M or self.w_attn.shape[1] != C:
            raise ValueError(f"w_attn shape {self.w_attn.shape} inconsistent with M={M}, C={C}")
        K = self.w_attn.shape[0] // M
        if K < 1:
            raise ValueError("need at least one sampling point per head")
        if self.w_offset.shape != (2 * M * K, C) or self.b_offset.shape != (2 * M * K,):
            raise ValueError(f"offset projection shape {self.w_offset.shape} inconsistent with M={M}, K={K}")
        if self.b_attn.shape != (M * K,):
            raise ValueError("attention bias shape mismatch")

    @classmethod
    def from_store(cls, params: ParamStore, prefix: str) -> "DeformAttnParams":
        return cls(
            w_out=params[f"{prefix}.w_out"],
            w_value=params[f"{prefix}.w_value"],
            w_offset=params[f"{prefix}.sampling.offset"],
            b_offset=params[f"{prefix}.sampling_bias.offset"],
            w_attn=params[f"{prefix}.w_attn"],
            b_attn=params[f"{prefix}.b_attn"],
        )

    @property
    def heads(self) -> int:
        return self.w_out.shape[0]

    @property
    def points(self) -> int:
        return self.w_attn.shape[0] // self.heads

    @property
    def query_dim(self) -> int:
        return self.w_out.shape[1]

    @property
    def image_channels(self) -> int:
        return self.w_value.shape[2]


def deform_attn_batch(queries: np.ndarray, fm: FeatureMap, refs: np.ndarray, p: DeformAttnParams,
                      return_cache: bool = False):
    """Deformable attention for N queries with reference points ``refs`` (N, 2) in pixels."""
    dtype = get_dtype()
    q = np.asarray(queries, dtype=dtype)
    if q.ndim != 2 or q.shape[1] != p.query_dim:
        raise ValueError(f"queries must be (N, {p.query_dim}), got {q.shape}")
    if fm.channels != p.image_channels:
        raise ValueError(f"feature map has {fm.channels} channels, attention expects {p.image_channels}")
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 2)
    N, M, K = len(q), p.heads, p.points

    offsets = linear(q, p.w_offset, p.b_offset).reshape(N, M, K, 2)
    logits = linear(q, p.w_attn, p.b_attn).reshape(N, M, K)
    weights = softmax(logits, axis=-1)

    # offsets are in cells; bilinear_sample_many takes pixels
    u = refs[:, None, None, 0] + offsets[..., 0].astype(np.float64) * fm.stride
    v = refs[:, None, None, 1] + offsets[..., 1].astype(np.float64) * fm.stride
    if return_cache:
        sampled, du, dv = bilinear_sample_many(fm, u, v, with_grad=True)
    else:
        sampled = bilinear_sample_many(fm, u, v)  # (N, M, K, C_I)

    w_value = p.w_value.astype(dtype)
    w_out = p.w_out.astype(dtype)
    values = np.einsum("mvc,nmkc->nmkv", w_value, sampled)
    heads = np.einsum("nmk,nmkv->nmv", weights, values)
    out = np.einsum("mcv,nmv->nc", w_out, heads)
    if not return_cache:
        return out
    cache = dict(offsets=offsets, weights=weights, sampled=sampled, values=values,
                 du=du * fm.stride, dv=dv * fm.stride)
    return out, cache


def deform_attn(query: np.ndarray, fm: FeatureMap, ref, p: DeformAttnParams) -> np.ndarray:
    """Deformable attention for one query around one reference point (pixels)."""
    q = np.asarray(query)[None, :]
    return deform_attn_batch(q, fm, np.asarray(ref, dtype=np.float64)[None, :], p)[0]


def encoder_param_spec(prefix: str, dim: int):
    spec = [
        (f"{prefix}.wq", (dim, dim)), (f"{prefix}.bq", (dim,)),
        (f"{prefix}.wk", (dim, dim)), (f"{prefix}.bk", (dim,)),
        (f"{prefix}.wv", (dim, dim)), (f"{prefix}.bv", (dim,)),
        (f"{prefix}.wo", (dim, dim)), (f"{prefix}.bo", (dim,)),
    ]
    return spec + ffn_param_spec(f"{prefix}.ffn", dim, dim)


def self_attn_layer(tokens: np.ndarray, mask: np.ndarray, params: ParamStore, prefix: str) -> np.ndarray:
    """Post-norm single-head transformer encoder layer over the valid tokens.

    Masked tokens neither attend nor are attended to and are returned as is.
    """
    dtype = get_dtype()
    x_all = np.asarray(tokens, dtype=dtype)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid tokens")
    x = x_all[mask]
    q = linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    scores = (q @ k.T) * dtype(1.0 / math.sqrt(x.shape[1]))
    attended = softmax(scores, axis=-1) @ v
    attended = linear(attended, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    h = layer_norm(x + attended)
    h = layer_norm(h + ffn(h, params, f"{prefix}.ffn"))
    out = x_all.copy()
    out[mask] = h
    return out
