"""Toy perception stack: vision / identity / text encoders and the text->vision prior.

The vision and text encoders are random-initialised and frozen (fixed by
seed). The identity encoder is trained by identity classification and the
prior by regression onto vision embeddings; both are frozen afterwards.
"""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

from . import tensorkit as tk
from .avatargen import CANVAS, CROP, N_STYLE_TOKENS, PAD, VOCAB_SIZE, AvatarSample, make_training_pair
from .nn import Conv2d, Linear, Module, l2_normalize
from .tensorkit import Tensor

log = logging.getLogger(__name__)

VISION_DIM = 64
IDENTITY_DIM = 32
TOKEN_DIM = 32
PRIOR_HIDDEN = 128

_HE = float(np.sqrt(6.0))


def _pool_matrix(h: int, w: int, k: int = 2) -> np.ndarray:
    """[h*w, (h//k)*(w//k)] average-pooling matrix for flattened maps."""
    ho, wo = h // k, w // k
    P = np.zeros((h * w, ho * wo), dtype=tk.DTYPE)
    for y in range(h):
        for x in range(w):
            P[y * w + x, (y // k) * wo + x // k] = 1.0 / (k * k)
    return P


def _check_shape(x: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
    x = np.asarray(x, dtype=tk.DTYPE)
    if x.shape[-3:] != shape:
        raise ValueError(f"{what} must have trailing shape {shape}, got {x.shape}")
    return x if x.ndim == 4 else x[None]


class VisionEncoder(Module):
    """3 conv stages (24 -> 12 -> 6), 2x2 average pooling, linear, layer norm."""

    def __init__(self, rng: np.random.Generator, dim: int = VISION_DIM):
        self.conv1 = Conv2d(3, 16, 3, rng, init_scale=_HE)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2, init_scale=_HE)
        self.conv3 = Conv2d(32, 32, 3, rng, stride=2, init_scale=_HE)
        self.proj = Linear(32 * 9, dim, rng, init_scale=_HE)
        self._pool = _pool_matrix(6, 6)
        self.dim = dim

    def __call__(self, images: Tensor) -> Tensor:
        h = tk.silu(self.conv1(images))
        h = tk.silu(self.conv2(h))
        h = tk.silu(self.conv3(h))
        B, C = h.shape[:2]
        h = tk.matmul(h.reshape(B * C, 36), Tensor(self._pool)).reshape(B, C * 9)
        return tk.layer_norm(self.proj(h), axis=-1)

    def encode(self, images: np.ndarray) -> np.ndarray:
        """[3,24,24] or [B,3,24,24] -> [64] or [B,64]."""
        single = np.ndim(images) == 3
        x = _check_shape(images, (3, CANVAS, CANVAS), "vision input")
        with tk.no_grad():
            out = self(Tensor(x)).data
        return out[0] if single else out


class IdentityEncoder(Module):
    """Face crop [3,12,12] -> unit-norm 32-d embedding; ``head`` is for training only."""

    def __init__(self, rng: np.random.Generator, num_classes: int, dim: int = IDENTITY_DIM):
        self.conv1 = Conv2d(3, 32, 3, rng)
        self.conv2 = Conv2d(32, 64, 3, rng, stride=2)
        self.conv3 = Conv2d(64, 64, 3, rng, stride=2)
        self.fc = Linear(64 * 9, 128, rng)
        self.embed = Linear(128, dim, rng)
        self.head = Linear(dim, num_classes, rng)
        self.dim = dim
        self.num_classes = num_classes

    def features(self, crops: Tensor) -> Tensor:
        h = tk.silu(self.conv1(crops))
        h = tk.silu(self.conv2(h))
        h = tk.silu(self.conv3(h))
        h = tk.silu(self.fc(h.reshape(h.shape[0], -1)))
        return self.embed(h)

    def encode(self, crops: np.ndarray) -> np.ndarray:
        single = np.ndim(crops) == 3
        x = _check_shape(crops, (3, CROP, CROP), "identity input")
        with tk.no_grad():
            out = l2_normalize(self.features(Tensor(x)).data)
        return out[0] if single else out

    def inference_state(self) -> dict[str, np.ndarray]:
        """Parameters without the classification head."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("head.")}


class TextEncoder(Module):
    """Token embedding table, mean pooling (padding included), linear, layer norm."""

    def __init__(self, rng: np.random.Generator, vocab: int = VOCAB_SIZE, dim: int = VISION_DIM,
                 token_dim: int = TOKEN_DIM, max_len: int = N_STYLE_TOKENS):
        self.table = Tensor(rng.normal(0, 1, size=(vocab, token_dim)), requires_grad=True)
        self.proj = Linear(token_dim, dim, rng, init_scale=_HE)
        self.vocab, self.max_len = vocab, max_len
        self._params = ("table",)

    def _counts(self, tokens: Sequence[Sequence[int]]) -> np.ndarray:
        C = np.zeros((len(tokens), self.vocab), dtype=tk.DTYPE)
        for i, seq in enumerate(tokens):
            seq = list(seq)[: self.max_len]
            seq = seq + [PAD] * (self.max_len - len(seq))
            for t in seq:
                if not 0 <= t < self.vocab:
                    raise ValueError(f"token {t} outside vocabulary of size {self.vocab}")
                C[i, t] += 1.0 / self.max_len
        return C

    def __call__(self, tokens: Sequence[Sequence[int]]) -> Tensor:
        pooled = tk.matmul(Tensor(self._counts(tokens)), self.table)
        return tk.layer_norm(self.proj(pooled), axis=-1)

    def encode(self, tokens) -> np.ndarray:
        single = len(tokens) == 0 or isinstance(tokens[0], (int, np.integer))
        batch = [tokens] if single else tokens
        with tk.no_grad():
            out = self(batch).data
        return out[0] if single else out


class PriorNet(Module):
    """64 -> 128 -> 64 MLP from text-embedding space into vision-embedding space."""

    def __init__(self, rng: np.random.Generator, dim: int = VISION_DIM, hidden: int = PRIOR_HIDDEN):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tk.silu(self.fc1(x)))

    def encode(self, text_emb: np.ndarray) -> np.ndarray:
        single = np.ndim(text_emb) == 1
        x = np.atleast_2d(np.asarray(text_emb, dtype=tk.DTYPE))
        with tk.no_grad():
            out = self(Tensor(x)).data
        return out[0] if single else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_identity_encoder(samples: Iterable[AvatarSample], epochs: int, rng: np.random.Generator,
                           lr: float = 2e-3, batch: int = 64,
                           encoder: IdentityEncoder | None = None) -> tuple[IdentityEncoder, list[float]]:
    """Softmax identity classification over face crops; returns (encoder, per-step losses)."""
    crops, labels = [], []
    for s in samples:
        if s.face_crop is None or not s.labels:
            continue
        crops.append(s.face_crop)
        labels.append(s.labels[0])
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("identity encoder training needs at least 2 identity classes")
    crops = np.stack(crops).astype(tk.DTYPE)
    if encoder is None:
        encoder = IdentityEncoder(rng, num_classes=int(labels.max()) + 1)
    opt = tk.Adam(encoder.parameters(), lr=lr)
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(crops))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            # brightness jitter keeps the embedding from keying on exact pixel values
            x = crops[idx] * rng.uniform(0.9, 1.1, size=(len(idx), 1, 1, 1)).astype(tk.DTYPE)
            logits = encoder.head(encoder.features(Tensor(np.clip(x, 0, 1))))
            loss = tk.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.info("identity encoder epoch %d loss %.4f", ep, losses[-1])
    return encoder, losses


def prior_pairs(samples: Iterable[AvatarSample], vision: VisionEncoder,
                text: TextEncoder) -> tuple[np.ndarray, np.ndarray]:
    """(text embeddings, vision embeddings of the matched style images)."""
    toks, imgs = [], []
    for s in samples:
        style_image, _, _ = make_training_pair(s)
        toks.append(s.style_tokens)
        imgs.append(style_image)
    if not toks:
        raise ValueError("prior training needs at least one (tokens, image) pair")
    return text.encode(toks), vision.encode(np.stack(imgs))


def prior_mse(prior: PriorNet, text_emb: np.ndarray, vision_emb: np.ndarray) -> float:
    pred = prior.encode(text_emb)
    return float(((pred.astype(np.float64) - vision_emb) ** 2).mean())


def train_prior(text_emb: np.ndarray, vision_emb: np.ndarray, epochs: int, rng: np.random.Generator,
                lr: float = 2e-3, batch: int = 64, prior: PriorNet | None = None) -> tuple[PriorNet, list[float]]:
    if len(text_emb) == 0:
        raise ValueError("prior training needs at least one pair")
    prior = prior or PriorNet(rng)
    opt = tk.Adam(prior.parameters(), lr=lr)
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(text_emb))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss = tk.mse(prior(Tensor(text_emb[idx])), Tensor(vision_emb[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.info("prior epoch %d loss %.4f", ep, losses[-1])
    return prior, losses
