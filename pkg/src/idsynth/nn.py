"""Parameter containers and small layers built on tensorkit."""
from __future__ import annotations

import numpy as np

from . import tensorkit as tk
from .tensorkit import Tensor


class Module:
    """Base class: sub-modules and parameters are discovered from attributes.

    Parameter names are dotted attribute paths, in attribute-definition order,
    so checkpoints are stable across runs.
    """

    frozen = False

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and key in self._param_names():
                if id(val) not in seen:
                    out[name] = val
                    seen.add(id(val))
            elif isinstance(val, Module):
                for n, p in val.named_parameters(name + ".").items():
                    if id(p) not in seen:
                        out[n] = p
                        seen.add(id(p))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    for n, p in m.named_parameters(f"{name}.{i}.").items():
                        if id(p) not in seen:
                            out[n] = p
                            seen.add(id(p))
        return out

    def _param_names(self) -> tuple[str, ...]:
        return getattr(self, "_params", ())

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "Module":
        """Stop gradient flow into this module's parameters."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=tk.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(tk.DTYPE), requires_grad=True)


class Linear(Module):
    _params = ("weight", "bias")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        bound = init_scale / np.sqrt(n_in)
        # stored [in, out] so that forward is x @ W
        self.weight = _param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        y = tk.matmul(x, self.weight) if x.ndim >= 2 else tk.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    _params = ("weight", "bias")

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, init_scale: float = 1.0):
        bound = init_scale / np.sqrt(c_in * k * k)
        self.weight = _param(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        self.bias = _param(np.zeros((1, c_out, 1, 1)))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return tk.conv2d(x, self.weight, self.stride, self.pad) + self.bias


class Norm(Module):
    """Layer norm over the given axes followed by a per-channel affine map.

    For feature maps [B, C, H, W] normalising over (1, 2, 3) is the
    single-group form of group norm; for token matrices use axis=-1.
    """

    _params = ("gain", "shift")

    def __init__(self, channels: int, axis=(1, 2, 3), channel_shape=None):
        shape = channel_shape if channel_shape is not None else (1, channels, 1, 1)
        self.gain = _param(np.ones(shape))
        self.shift = _param(np.zeros(shape))
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return tk.layer_norm(x, self.axis) * self.gain + self.shift


def upsample_matrix(h: int, w: int, factor: int = 2) -> np.ndarray:
    """[h*w, (h*f)*(w*f)] 0/1 matrix so that flat @ U is nearest-neighbour upsampling."""
    H, W = h * factor, w * factor
    U = np.zeros((h * w, H * W), dtype=tk.DTYPE)
    for y in range(H):
        for x in range(W):
            U[(y // factor) * w + x // factor, y * W + x] = 1.0
    return U


def upsample(x: Tensor, U: np.ndarray, factor: int = 2) -> Tensor:
    B, C, h, w = x.shape
    flat = x.reshape(B * C, h * w)
    return tk.matmul(flat, Tensor(U)).reshape(B, C, h * factor, w * factor)


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.sqrt((v.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    return (v / np.maximum(n, eps)).astype(tk.DTYPE)
