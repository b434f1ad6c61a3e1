"""Attention operators.

Path attention assigns one head per trajectory reference point; each head
samples K offset locations around its point, softmax-normalizes the K
weights within the head, and projects through per-head value/output
matrices. The deformable baseline is the same algebra with every head
anchored at a single shared reference point, provided so the harness can
swap mechanisms. Standard MHSA / cross-attention blocks back the fusion
stack.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (Linear, Module, ShapeError, Tensor, as_tensor, bmm,
                       concat, mul, reshape, softmax, transpose, tsum, ttanh,
                       xavier_uniform)
from .geometry import BevGrid, bilinear_sample_many


class PathAttentionParams(Module):
    """Per-head projections plus the offset and weight heads.

    head_width defaults to width // n_heads when divisible, else width.
    Offset and weight heads start at zero so the operator initially samples
    exactly on the path with uniform weights.
    """

    def __init__(self, width: int, n_heads: int, n_samples: int,
                 rng: np.random.Generator, head_width: int | None = None,
                 max_offset_cells: float = 4.0):
        super().__init__()
        if head_width is None:
            head_width = width // n_heads if width % n_heads == 0 else width
        self.width = width
        self.n_heads = n_heads
        self.n_samples = n_samples
        self.head_width = head_width
        self.max_offset_cells = max_offset_cells
        self.value_proj = Tensor(
            xavier_uniform(rng, width, head_width, (n_heads, head_width, width)),
            requires_grad=True)
        self.out_proj = Tensor(
            xavier_uniform(rng, head_width, width, (n_heads, width, head_width)),
            requires_grad=True)
        self.offset_head = Linear(width, n_heads * n_samples * 2, rng, zero_init=True)
        self.weight_head = Linear(width, n_heads * n_samples, rng, zero_init=True)


def sample_weights(query: Tensor, params: PathAttentionParams) -> Tensor:
    """Per-head softmax weights over the K samples, shape (T, K)."""
    logits = reshape(params.weight_head(query), (params.n_heads, params.n_samples))
    return softmax(logits, axis=1)


def sample_offsets(query: Tensor, params: PathAttentionParams) -> Tensor:
    """Bounded sampling offsets in grid cells, shape (T, K, 2)."""
    raw = reshape(params.offset_head(query), (params.n_heads, params.n_samples, 2))
    return mul(ttanh(raw), as_tensor(params.max_offset_cells))


def path_attention_multi(queries: Tensor, ref_points, grid: BevGrid | Tensor,
                         params: PathAttentionParams) -> Tensor:
    """Path attention applied independently to M modality queries at once.

    queries: (M, C); ref_points: (M, T, 2) grid coordinates. The math is
    exactly the per-modality operator, batched for speed; returns (M, C).
    """
    feat = grid.features if isinstance(grid, BevGrid) else grid
    pts = as_tensor(ref_points)
    m, width = queries.shape
    t, k = params.n_heads, params.n_samples
    if pts.shape != (m, t, 2):
        raise ShapeError("path_attention", pts.shape, (m, t, 2))
    offsets = reshape(params.offset_head(queries), (m, t, k, 2))
    offsets = mul(ttanh(offsets), as_tensor(params.max_offset_cells))
    locs = reshape(reshape(pts, (m, t, 1, 2)) + offsets, (m * t * k, 2))
    feats = reshape(bilinear_sample_many(feat, locs), (m, t, k, width))
    logits = reshape(params.weight_head(queries), (m, t, k))
    attn = softmax(logits, axis=2)
    weighted = tsum(mul(reshape(attn, (m, t, k, 1)), feats), axis=2)   # (M, T, C)
    per_head = transpose(weighted, (1, 2, 0))                          # (T, C, M)
    head_vals = bmm(params.value_proj, per_head)                       # (T, C_T, M)
    out = tsum(bmm(params.out_proj, head_vals), axis=0)                # (C, M)
    return transpose(out)


def path_attention(query: Tensor, ref_points, grid: BevGrid | Tensor,
                   params: PathAttentionParams) -> Tensor:
    """Trajectory-guided attention for one planning modality.

    query: (C,) ego query; ref_points: (T, 2) grid coordinates (tensor or
    array); differentiable in the query, the grid, the reference points and
    every parameter.
    """
    pts = as_tensor(ref_points)
    t = params.n_heads
    if pts.shape != (t, 2):
        raise ShapeError("path_attention", pts.shape, (t, 2))
    out = path_attention_multi(reshape(query, (1, params.width)),
                               reshape(pts, (1, t, 2)), grid, params)
    return reshape(out, (params.width,))


def deformable_attention_multi(queries: Tensor, anchors: Tensor,
                               grid: BevGrid | Tensor,
                               params: PathAttentionParams) -> Tensor:
    """Batched deformable baseline: per query one shared anchor, (M, 2)."""
    m = queries.shape[0]
    refs = reshape(anchors, (m, 1, 2)) + as_tensor(np.zeros((1, params.n_heads, 2)))
    return path_attention_multi(queries, refs, grid, params)


def deformable_attention_baseline(query: Tensor, ref_point, grid: BevGrid | Tensor,
                                  params: PathAttentionParams) -> Tensor:
    """Standard deformable attention: all heads share one reference point."""
    p = as_tensor(ref_point)
    if p.shape != (2,):
        raise ShapeError("deformable_attention_baseline", p.shape, (2,))
    tiled = concat([reshape(p, (1, 2))] * params.n_heads, axis=0)
    return path_attention(query, tiled, grid, params)


def _attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    m, width = q.shape
    n = k.shape[0]
    d = width // n_heads
    qh = transpose(reshape(q, (m, n_heads, d)), (1, 0, 2))          # (h, m, d)
    kh = transpose(reshape(k, (n, n_heads, d)), (1, 2, 0))          # (h, d, n)
    vh = transpose(reshape(v, (n, n_heads, d)), (1, 0, 2))          # (h, n, d)
    scores = mul(bmm(qh, kh), as_tensor(1.0 / math.sqrt(d)))
    attn = softmax(scores, axis=2)
    out = bmm(attn, vh)                                             # (h, m, d)
    return reshape(transpose(out, (1, 0, 2)), (m, width))


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if width % n_heads != 0:
            raise ShapeError("mhsa", (width,), (n_heads,))
        self.n_heads = n_heads
        self.q_proj = Linear(width, width, rng)
        self.k_proj = Linear(width, width, rng)
        self.v_proj = Linear(width, width, rng)
        self.o_proj = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        out = _attend(self.q_proj(x), self.k_proj(x), self.v_proj(x), self.n_heads)
        return self.o_proj(out)


class MultiHeadCrossAttention(Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if width % n_heads != 0:
            raise ShapeError("cross_attention", (width,), (n_heads,))
        self.n_heads = n_heads
        self.q_proj = Linear(width, width, rng)
        self.k_proj = Linear(width, width, rng)
        self.v_proj = Linear(width, width, rng)
        self.o_proj = Linear(width, width, rng)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        out = _attend(self.q_proj(q), self.k_proj(kv), self.v_proj(kv), self.n_heads)
        return self.o_proj(out)


def mhsa(x: Tensor, block: MultiHeadSelfAttention) -> Tensor:
    """Functional alias used by the gradcheck registry."""
    return block(x)


def cross_attention(q: Tensor, kv: Tensor, block: MultiHeadCrossAttention) -> Tensor:
    return block(q, kv)
