"""Hybrid guidance: identity fusion for the image and text branches, alpha
blending, identity mixing and classifier-free condition dropout.

Both branches call the same ``FusionLayer`` instance, so a parameter update
reaches them identically and a checkpoint stores the weights once.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensorkit as tk
from .encoders import IDENTITY_DIM, VISION_DIM
from .nn import Linear, Module, l2_normalize
from .tensorkit import Tensor

P_STYLE_DROP = 0.64
P_FACE_DROP = 0.10


class FusionLayer(Module):
    """Linear map concat(e, e_f) [96] -> [64] shared by both guidance branches."""

    def __init__(self, rng: np.random.Generator, dim: int = VISION_DIM, id_dim: int = IDENTITY_DIM,
                 id_gain: float = 1.0):
        self.linear = Linear(dim + id_dim, dim, rng)
        # e_f is unit norm while e_h sits near norm 8; scaling its rows at init
        # keeps the identity from starting out as a rounding error
        self.linear.weight.data[dim:] *= id_gain
        self.dim, self.id_dim = dim, id_dim

    def __call__(self, e: Tensor, e_f: Tensor) -> Tensor:
        if e.shape[-1] != self.dim or e_f.shape[-1] != self.id_dim:
            raise ValueError(f"fusion expects dims ({self.dim}, {self.id_dim}), "
                             f"got ({e.shape[-1]}, {e_f.shape[-1]})")
        return self.linear(tk.concat([e, e_f], axis=-1))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def fuse_image_branch(e_h, e_f, layer: FusionLayer) -> Tensor:
    return layer(_t(e_h), _t(e_f))


def fuse_text_branch(e_T, e_f, layer: FusionLayer) -> Tensor:
    return layer(_t(e_T), _t(e_f))


def blend(e_i, e_p, alpha: float):
    """alpha * e_i + (1 - alpha) * e_p (numpy arrays or Tensors)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(e_i, Tensor) or isinstance(e_p, Tensor):
        if alpha == 1.0:
            return _t(e_i)
        if alpha == 0.0:
            return _t(e_p)
        return tk.scale(_t(e_i), alpha) + tk.scale(_t(e_p), 1.0 - alpha)
    if alpha == 1.0:
        return np.array(e_i, dtype=tk.DTYPE)
    if alpha == 0.0:
        return np.array(e_p, dtype=tk.DTYPE)
    return (alpha * np.asarray(e_i, dtype=np.float64) + (1.0 - alpha) * np.asarray(e_p, dtype=np.float64)).astype(tk.DTYPE)


@dataclass(frozen=True)
class MixWeights:
    beta: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("mix weights need at least one entry")
        if (b < 0).any():
            raise ValueError(f"mix weights must be non-negative: {self.beta}")
        if abs(b.sum() - 1.0) > 1e-6:
            raise ValueError(f"mix weights must sum to 1, got {b.sum()}")
        object.__setattr__(self, "beta", tuple(float(v) for v in b))


def mix_identities(embeddings: Sequence[np.ndarray], weights: MixWeights, normalize: bool = False) -> np.ndarray:
    """Weighted sum of face embeddings (not re-normalised unless asked)."""
    if len(embeddings) != len(weights.beta):
        raise ValueError(f"{len(embeddings)} embeddings but {len(weights.beta)} weights")
    E = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings])
    beta = np.asarray(weights.beta)
    nz = beta != 0
    out = (beta[nz, None] * E[nz]).sum(axis=0) if nz.any() else np.zeros(E.shape[1])
    out = out.astype(tk.DTYPE)
    return l2_normalize(out) if normalize else out


@dataclass(frozen=True)
class GuidanceBundle:
    """Conditioning embeddings for one sample.

    ``e_h``/``e_T`` are the raw image/text branch inputs (either may be
    absent); ``e_i``/``e_p``/``e_g`` are filled in by :func:`fuse_bundle`.
    """

    e_f: np.ndarray
    e_h: np.ndarray | None = None
    e_T: np.ndarray | None = None
    alpha: float = 1.0
    e_i: np.ndarray | None = None
    e_p: np.ndarray | None = None
    e_g: np.ndarray | None = None
    dropped_style: bool = False
    dropped_face: bool = False

    def __post_init__(self):
        if self.e_h is None and self.e_T is None:
            raise ValueError("a guidance bundle needs an image or a text branch")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def fuse_bundle(bundle: GuidanceBundle, layer: FusionLayer) -> GuidanceBundle:
    with tk.no_grad():
        e_i = fuse_image_branch(bundle.e_h, bundle.e_f, layer).data if bundle.e_h is not None else None
        e_p = fuse_text_branch(bundle.e_T, bundle.e_f, layer).data if bundle.e_T is not None else None
    if e_i is not None and e_p is not None:
        e_g = blend(e_i, e_p, bundle.alpha)
    else:
        e_g = e_i if e_i is not None else e_p
    return replace(bundle, e_i=e_i, e_p=e_p, e_g=e_g)


def make_bundle(layer: FusionLayer, e_f, e_h=None, e_T=None, alpha: float = 1.0) -> GuidanceBundle:
    as_arr = lambda v: None if v is None else np.asarray(v, dtype=tk.DTYPE)
    return fuse_bundle(GuidanceBundle(e_f=as_arr(e_f), e_h=as_arr(e_h), e_T=as_arr(e_T), alpha=alpha), layer)


def unconditional_bundle(layer: FusionLayer, alpha: float = 1.0) -> GuidanceBundle:
    """All conditions dropped: zero style and zero face embeddings."""
    return make_bundle(layer, np.zeros(layer.id_dim), e_h=np.zeros(layer.dim), alpha=alpha)


def cfg_dropout(bundle: GuidanceBundle, rng: np.random.Generator, p_style: float = P_STYLE_DROP,
                p_face: float = P_FACE_DROP, layer: FusionLayer | None = None) -> GuidanceBundle:
    """Independently zero the style (image/text branch) and face embeddings.

    One face decision covers both branches. Derived embeddings are cleared,
    or recomputed when ``layer`` is given.
    """
    u_style, u_face = rng.random(2)
    drop_s = bool(u_style < p_style)
    drop_f = bool(u_face < p_face)
    if not (drop_s or drop_f):
        return bundle
    zero = lambda v: None if v is None else np.zeros_like(v)
    out = replace(bundle,
                  e_h=zero(bundle.e_h) if drop_s else bundle.e_h,
                  e_T=zero(bundle.e_T) if drop_s else bundle.e_T,
                  e_f=np.zeros_like(bundle.e_f) if drop_f else bundle.e_f,
                  e_i=None, e_p=None, e_g=None,
                  dropped_style=bundle.dropped_style or drop_s,
                  dropped_face=bundle.dropped_face or drop_f)
    return fuse_bundle(out, layer) if layer is not None else out


def dropout_keep_masks(rng: np.random.Generator, n: int, p_style: float = P_STYLE_DROP,
                       p_face: float = P_FACE_DROP) -> tuple[np.ndarray, np.ndarray]:
    """Batched form of :func:`cfg_dropout`: (keep_style, keep_face) as float [n, 1]."""
    u = rng.random((n, 2))
    keep_s = (u[:, 0] >= p_style).astype(tk.DTYPE)[:, None]
    keep_f = (u[:, 1] >= p_face).astype(tk.DTYPE)[:, None]
    return keep_s, keep_f
