"""Guidance cross-attention: dense, and routed per identity region.

Feature maps are token matrices F [B, HW, C]; guidance is one pooled token
per sample, e_g [B, 64]. Both functions return F + attention(F, e_g).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorkit as tk
from .encoders import VISION_DIM
from .nn import Linear, Module
from .tensorkit import Tensor


@dataclass
class FeatureMap:
    F: Tensor          # [B, H*W, C] (or [H*W, C])
    H: int
    W: int

    def __post_init__(self):
        if self.F.shape[-2] != self.H * self.W:
            raise ValueError(f"feature rows {self.F.shape[-2]} != H*W = {self.H * self.W}")


@dataclass
class GuidanceSet:
    """Per-identity guidance embeddings with their (bottleneck-resolution) region masks."""

    embeddings: list          # each [B, 64] or [64]
    masks: list               # each bool [H, W]

    def __post_init__(self):
        if len(self.embeddings) != len(self.masks):
            raise ValueError(f"{len(self.embeddings)} embeddings but {len(self.masks)} masks")
        if not self.embeddings:
            raise ValueError("guidance set is empty")
        check_disjoint(self.masks)


def check_disjoint(masks: Sequence[np.ndarray]) -> None:
    total = np.zeros(np.shape(masks[0]), dtype=int)
    for m in masks:
        total += np.asarray(m, dtype=bool)
    if (total > 1).any():
        raise ValueError("region masks overlap")


class AttentionParams(Module):
    """Q/K/V/O projections; ``d`` is split across ``heads``."""

    def __init__(self, rng: np.random.Generator, channels: int, guide_dim: int = VISION_DIM,
                 d: int = 32, heads: int = 2):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.wq = Linear(channels, d, rng)
        self.wk = Linear(guide_dim, d, rng)
        self.wv = Linear(guide_dim, d, rng)
        self.wo = Linear(d, channels, rng)
        self.channels, self.guide_dim, self.d, self.heads = channels, guide_dim, d, heads


def _as_batch(F: Tensor, e_g) -> tuple[Tensor, Tensor, bool]:
    e = e_g if isinstance(e_g, Tensor) else Tensor(e_g)
    single = F.ndim == 2
    if single:
        F = F.reshape(1, *F.shape)
    if e.ndim == 1:
        e = e.reshape(1, 1, e.shape[0])
    elif e.ndim == 2:
        e = e.reshape(e.shape[0], 1, e.shape[1])
    if e.shape[0] != F.shape[0]:
        raise ValueError(f"guidance batch {e.shape[0]} != feature batch {F.shape[0]}")
    return F, e, single


def attend(F: Tensor, e_g, params: AttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V W_O without the residual. F: [B, N, C]; e_g: [B, L, G]."""
    F, e, single = _as_batch(F, e_g)
    if F.shape[-1] != params.channels or e.shape[-1] != params.guide_dim:
        raise ValueError(f"attention expects channels {params.channels} and guidance {params.guide_dim}, "
                         f"got {F.shape[-1]} and {e.shape[-1]}")
    B, N, _ = F.shape
    L = e.shape[1]
    h, dh = params.heads, params.d // params.heads
    q = params.wq(F).reshape(B, N, h, dh).transpose(0, 2, 1, 3)
    k = params.wk(e).reshape(B, L, h, dh).transpose(0, 2, 3, 1)
    v = params.wv(e).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
    w = tk.softmax(tk.scale(tk.matmul(q, k), 1.0 / np.sqrt(dh)), axis=-1)     # [B, h, N, L]
    o = tk.matmul(w, v).transpose(0, 2, 1, 3).reshape(B, N, params.d)
    out = params.wo(o)
    return out.reshape(N, params.channels) if single else out


def cross_attention(F: Tensor, e_g, params: AttentionParams) -> Tensor:
    """F + Attention(Q from F, K/V from e_g)."""
    return F + attend(F, e_g, params)


def assign_regions(masks: Sequence[np.ndarray], embeddings: Sequence, nonhuman_seed: int) -> np.ndarray:
    """Identity index per position (flattened). Positions outside every mask get a
    seeded uniform draw; identities are canonically ordered first so that the
    draw does not depend on the order in which pairs are listed."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    check_disjoint(masks)
    n = len(masks)
    assign = np.full(masks[0].size, -1, dtype=np.int64)
    for i, m in enumerate(masks):
        assign[m.reshape(-1)] = i
    free = assign < 0
    if free.any():
        keys = [np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float32).tobytes() for e in embeddings]
        canonical = sorted(range(n), key=lambda i: (keys[i], i))
        draws = np.random.default_rng(nonhuman_seed).integers(0, n, size=int(free.sum()))
        assign[free] = np.asarray(canonical)[draws]
    return assign


def multi_identity_cross_attention(F: Tensor, gs: GuidanceSet, params: AttentionParams,
                                   nonhuman_seed: int = 0) -> Tensor:
    """Positions in region i attend only to e_g^i; the rest follow ``assign_regions``."""
    assign = assign_regions(gs.masks, gs.embeddings, nonhuman_seed)
    if assign.size != F.shape[-2]:
        raise ValueError(f"masks cover {assign.size} positions, features have {F.shape[-2]}")
    acc = None
    for i, e in enumerate(gs.embeddings):
        sel = (assign == i).astype(tk.DTYPE)[:, None]
        if not sel.any():
            continue
        term = attend(F, e, params) * Tensor(sel)
        acc = term if acc is None else acc + term
    return F + acc


def downsample_masks(masks: Sequence[np.ndarray], factor: int) -> list[np.ndarray]:
    """Max-pool instance masks by ``factor``; a cell touched by several instances
    goes to the one covering most of it (ties: lower index), keeping masks disjoint."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    H, W = masks[0].shape
    h, w = H // factor, W // factor
    cover = np.stack([m[:h * factor, :w * factor].reshape(h, factor, w, factor).sum(axis=(1, 3)) for m in masks])
    best = cover.argmax(axis=0)
    touched = cover.max(axis=0) > 0
    return [(best == i) & touched for i in range(len(masks))]
