"""Noise schedule, U-Net-lite denoiser, denoising objective and Euler-ancestral sampling.

The "latent" is the pixel image itself. Sampling runs in sigma space
(x = z0 + sigma * eps); the denoiser rescales x by 1/sqrt(1 + sigma^2) before
calling the network, which was trained on variance-preserving z_t.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorkit as tk
from .attention import AttentionParams, GuidanceSet, cross_attention, multi_identity_cross_attention
from .avatargen import CANVAS, AvatarSample, make_training_pair
from .encoders import VISION_DIM, IdentityEncoder, VisionEncoder
from .guidance import FusionLayer, dropout_keep_masks
from .nn import Conv2d, Linear, Module, Norm, upsample, upsample_matrix
from .tensorkit import Tensor

log = logging.getLogger(__name__)

T_DEFAULT = 1000
SAMPLER_STEPS = 25
BETA_START = 8.5e-4
BETA_END = 1.2e-2


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray                 # [T], float64, index t-1
    alpha_bar: np.ndarray            # [T]
    timesteps: np.ndarray            # sampler timesteps, descending, 1-based
    sigmas: np.ndarray               # [steps + 1], descending, last = 0

    def ab(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return self.alpha_bar[t - 1]

    @property
    def steps(self) -> int:
        return len(self.timesteps)


def sampler_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided over [1, T], largest first."""
    if steps < 1:
        raise ValueError("sampler needs at least one step")
    ts = np.round(np.linspace(T, 1, steps)).astype(np.int64)
    if len(np.unique(ts)) != steps:
        raise ValueError(f"{steps} distinct timesteps do not fit in [1, {T}]")
    return ts


def build_schedule(T: int = T_DEFAULT, beta_start: float = BETA_START, beta_end: float = BETA_END,
                   steps: int = SAMPLER_STEPS) -> NoiseSchedule:
    """Scaled-linear schedule: sqrt(beta) linear from sqrt(beta_start) to sqrt(beta_end)."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    ts = sampler_timesteps(T, steps)
    ab = alpha_bar[ts - 1]
    sigmas = np.append(np.sqrt((1.0 - ab) / ab), 0.0)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, timesteps=ts, sigmas=sigmas)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` scalar or one per batch row."""
    z0 = np.asarray(z0)
    if np.shape(eps) != z0.shape:
        raise ValueError(f"eps shape {np.shape(eps)} != z0 shape {z0.shape}")
    ab = schedule.ab(t)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(tk.DTYPE)


# ---------------------------------------------------------------------------
# U-Net-lite
# ---------------------------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int = 32, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(tk.DTYPE)


def coord_channels(B: int, size: int = CANVAS) -> np.ndarray:
    lin = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    return np.broadcast_to(np.stack([xx, yy])[None], (B, 2, size, size)).astype(tk.DTYPE)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, rng: np.random.Generator):
        self.norm1 = Norm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.temb = Linear(t_dim, c_out, rng)
        self.norm2 = Norm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, init_scale=0.1)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(tk.silu(self.norm1(x)))
        B, C = h.shape[:2]
        h = h + self.temb(temb).reshape(B, C, 1, 1)
        h = self.conv2(tk.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class UNetLite(Module):
    """24 -> 12 -> 6 encoder, guidance cross-attention at 6x6, mirrored decoder with skips.

    Two fixed coordinate channels are appended to the input so that layout
    carried by the (spatially uniform) guidance token can be placed.

    With ``sigma_data > 0`` the network output F is mixed with the input as
    x0 = c_skip * x + c_out * F and reported as the matching noise estimate,
    so F has a unit-scale target at every noise level. ``alpha_bar`` (the
    training schedule) is then needed to map timesteps to sigma.
    """

    def __init__(self, rng: np.random.Generator, c1: int = 16, c2: int = 64, t_dim: int = 64,
                 guide_dim: int = VISION_DIM, heads: int = 2, d: int = 32, sigma_data: float = 0.0,
                 alpha_bar: np.ndarray | None = None):
        if sigma_data < 0:
            raise ValueError(f"sigma_data must be >= 0, got {sigma_data}")
        if sigma_data > 0 and alpha_bar is None:
            raise ValueError("a preconditioned U-Net needs the schedule's alpha_bar")
        self.t_fc1 = Linear(32, t_dim, rng)
        self.t_fc2 = Linear(t_dim, t_dim, rng)
        self.conv_in = Conv2d(3 + 2, c1, 3, rng)
        self.res24 = ResBlock(c1, c1, t_dim, rng)
        self.down1 = Conv2d(c1, c2, 3, rng, stride=2)
        self.res12 = ResBlock(c2, c2, t_dim, rng)
        self.down2 = Conv2d(c2, c2, 3, rng, stride=2)
        self.mid1 = ResBlock(c2, c2, t_dim, rng)
        self.attn = AttentionParams(rng, c2, guide_dim, d=d, heads=heads)
        self.mid2 = ResBlock(c2, c2, t_dim, rng)
        self.up12 = ResBlock(2 * c2, c2, t_dim, rng)
        self.narrow12 = Conv2d(c2, c1, 1, rng)     # 1x1, so the 24x24 block sees 2*c1 channels
        self.up24 = ResBlock(2 * c1, c1, t_dim, rng)
        self.norm_out = Norm(c1)
        self.conv_out = Conv2d(c1, 3, 3, rng, init_scale=0.0)
        self._up6 = upsample_matrix(6, 6)
        self._up12 = upsample_matrix(12, 12)
        self.c1, self.c2 = c1, c2
        self.sigma_data = sigma_data
        self._alpha_bar = None if alpha_bar is None else np.asarray(alpha_bar, dtype=np.float64)

    def __call__(self, z: Tensor, t: np.ndarray, guidance, nonhuman_seed: int = 0) -> Tensor:
        """z: [B,3,24,24]; t: [B] ints; guidance: e_g [B,64] or a GuidanceSet."""
        B = z.shape[0]
        temb = self.t_fc2(tk.silu(self.t_fc1(Tensor(timestep_embedding(t)))))
        x = tk.concat([z, Tensor(coord_channels(B))], axis=1)
        h24 = self.res24(self.conv_in(x), temb)
        h12 = self.res12(self.down1(h24), temb)
        h6 = self.mid1(self.down2(h12), temb)

        C = self.c2
        tokens = h6.reshape(B, C, 36).transpose(0, 2, 1)
        if isinstance(guidance, GuidanceSet):
            tokens = multi_identity_cross_attention(tokens, guidance, self.attn, nonhuman_seed)
        else:
            tokens = cross_attention(tokens, guidance, self.attn)
        h6 = self.mid2(tokens.transpose(0, 2, 1).reshape(B, C, 6, 6), temb)

        u12 = self.up12(tk.concat([upsample(h6, self._up6), h12], axis=1), temb)
        u24 = self.up24(tk.concat([upsample(self.narrow12(u12), self._up12), h24], axis=1), temb)
        out = self.conv_out(tk.silu(self.norm_out(u24)))
        return out if self.sigma_data == 0 else self._precondition(z, out, t)

    def _precondition(self, z: Tensor, F: Tensor, t: np.ndarray) -> Tensor:
        # z = sqrt(ab) * (x0 + sigma * eps); eps_hat = (z / sqrt(ab) - x0_hat) / sigma
        ab = self._alpha_bar[np.asarray(t).reshape(-1) - 1]
        sigma = np.sqrt((1.0 - ab) / ab)
        sd2 = self.sigma_data ** 2
        c_skip = sd2 / (sigma ** 2 + sd2)
        c_out = sigma * self.sigma_data / np.sqrt(sigma ** 2 + sd2)
        a = ((1.0 - c_skip) / (sigma * np.sqrt(ab))).astype(tk.DTYPE).reshape(-1, 1, 1, 1)
        b = (c_out / sigma).astype(tk.DTYPE).reshape(-1, 1, 1, 1)
        return z * Tensor(a) - F * Tensor(b)

    def predict(self, z: np.ndarray, t, guidance, nonhuman_seed: int = 0) -> np.ndarray:
        z = np.asarray(z, dtype=tk.DTYPE)
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        with tk.no_grad():
            return self(Tensor(z), t, guidance, nonhuman_seed).data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class DiffusionModels:
    unet: UNetLite
    fusion: FusionLayer
    vision: VisionEncoder
    identity: IdentityEncoder

    def trainable(self) -> list[Tensor]:
        return self.unet.parameters() + self.fusion.parameters()


@dataclass
class TrainBatch:
    style_images: np.ndarray        # [B,3,24,24], face region gray
    face_crops: np.ndarray          # [B,3,12,12]; zeros where has_face is False
    targets: np.ndarray             # [B,3,24,24]
    has_face: np.ndarray            # [B] bool


def make_batch(samples: Sequence[AvatarSample]) -> TrainBatch:
    styles, crops, targets, has_face = [], [], [], []
    for s in samples:
        style_image, crop, target = make_training_pair(s)
        styles.append(style_image)
        targets.append(target)
        has_face.append(crop is not None)
        crops.append(crop if crop is not None else np.zeros((3, 12, 12), dtype=tk.DTYPE))
    return TrainBatch(np.stack(styles), np.stack(crops), np.stack(targets), np.asarray(has_face))


def encode_batch(batch: TrainBatch, models: DiffusionModels) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-encoder embeddings (e_h, e_f); face-free samples get e_f = 0."""
    e_h = models.vision.encode(batch.style_images)
    e_f = models.identity.encode(batch.face_crops)
    e_f[~batch.has_face] = 0.0
    assert not e_f[~batch.has_face].any(), "face-free samples must carry a zero face embedding"
    return e_h, e_f


@dataclass
class StepResult:
    loss: float
    eps: np.ndarray
    pred: np.ndarray
    t: np.ndarray


def training_step(batch: TrainBatch, models: DiffusionModels, opt: tk.Adam, schedule: NoiseSchedule,
                  rng: np.random.Generator, p_style: float = 0.64, p_face: float = 0.10,
                  embeddings: tuple[np.ndarray, np.ndarray] | None = None) -> StepResult:
    """One optimisation step of the noise-prediction MSE on the image branch."""
    e_h, e_f = embeddings if embeddings is not None else encode_batch(batch, models)
    B = len(e_h)
    keep_s, keep_f = dropout_keep_masks(rng, B, p_style, p_face)
    e_i = models.fusion(Tensor(e_h * keep_s), Tensor(e_f * keep_f))
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(batch.targets.shape).astype(tk.DTYPE)
    z_t = q_sample(batch.targets, t, eps, schedule)
    pred = models.unet(Tensor(z_t), t, e_i)
    loss = tk.mse(pred, Tensor(eps))
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss at t={t.tolist()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return StepResult(loss.item(), eps, pred.data, t)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    lr_final_frac: float = 1.0       # cosine decay to lr * this by the last step; 1 keeps it constant
    p_style: float = 0.64
    p_face: float = 0.10
    seed: int = 0
    log_every: int = 100

    def lr_at(self, step: int) -> float:
        f = self.lr_final_frac
        return self.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / max(self.steps - 1, 1))))


def train_diffusion(samples: Sequence[AvatarSample], models: DiffusionModels, schedule: NoiseSchedule,
                    cfg: TrainConfig, callback=None) -> list[tuple[int, float]]:
    """Adam on U-Net + fusion layer; encoders stay frozen. Returns (step, loss) pairs."""
    models.vision.freeze()
    models.identity.freeze()
    rng = np.random.default_rng([cfg.seed, 2])
    full = make_batch(samples)
    e_h_all, e_f_all = encode_batch(full, models)
    opt = tk.Adam(models.trainable(), lr=cfg.lr)
    curve = []
    n = len(samples)
    order = rng.permutation(n)
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + cfg.batch])
        pos += cfg.batch
        opt.state.lr = cfg.lr_at(step)
        batch = TrainBatch(full.style_images[idx], full.face_crops[idx], full.targets[idx], full.has_face[idx])
        res = training_step(batch, models, opt, schedule, rng, cfg.p_style, cfg.p_face,
                            embeddings=(e_h_all[idx], e_f_all[idx]))
        curve.append((step, res.loss))
        if step % cfg.log_every == 0:
            recent = np.mean([l for _, l in curve[-cfg.log_every:]])
            log.info("diffusion step %d loss %.4f", step, recent)
        if callback is not None:
            callback(step, res.loss)
    return curve


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise ValueError("conditional and unconditional predictions differ in shape")
    if w < 0:
        raise ValueError(f"guidance weight must be non-negative, got {w}")
    if w == 1.0:
        return np.array(eps_cond, copy=True)
    if w == 0.0:
        return np.array(eps_uncond, copy=True)
    return (eps_uncond + w * (eps_cond - eps_uncond)).astype(tk.DTYPE)


def ancestral_step(sigma_from: float, sigma_to: float) -> tuple[float, float]:
    """(sigma_down, sigma_up) for one Euler-ancestral step."""
    if sigma_to == 0.0:
        return 0.0, 0.0
    sigma_up = math.sqrt(sigma_to ** 2 * (sigma_from ** 2 - sigma_to ** 2) / sigma_from ** 2)
    sigma_up = min(sigma_up, sigma_to)  # rounding can push it past sigma_to when the step is tiny
    sigma_down = math.sqrt(sigma_to ** 2 - sigma_up ** 2)
    return sigma_down, sigma_up


@dataclass
class SamplerConfig:
    steps: int = SAMPLER_STEPS
    cfg_weight: float = 3.0
    img2img_strength: float = 1.0
    seed: int = 0
    mode: str = "guided"                  # guided | multi | img2img
    nonhuman: str = "random"              # random | fixed (multi mode)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.img2img_strength <= 1.0:
            raise ValueError(f"img2img strength must lie in [0, 1], got {self.img2img_strength}")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.mode not in ("guided", "multi", "img2img"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.nonhuman not in ("random", "fixed"):
            raise ValueError(f"unknown non-human policy {self.nonhuman!r}")


def img2img_init(image: np.ndarray, strength: float, schedule: NoiseSchedule,
                 seed: int) -> tuple[np.ndarray, int]:
    """(z_start, grid index to start from). strength 0 -> the image itself, no steps."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    steps = schedule.steps
    start_step = int(round(strength * steps))
    k = steps - start_step
    noise = np.random.default_rng([seed, 7]).standard_normal(np.shape(image))
    z = (np.asarray(image, dtype=np.float64) + schedule.sigmas[k] * noise).astype(tk.DTYPE)
    return z, k


class Denoiser:
    """Wraps the noise-prediction U-Net as eps_hat(x, sigma_i) with CFG."""

    def __init__(self, unet: UNetLite, schedule: NoiseSchedule, cond, uncond: np.ndarray,
                 cfg_weight: float, nonhuman_seed: int = 0):
        self.unet, self.schedule = unet, schedule
        self.cond, self.uncond = cond, np.asarray(uncond, dtype=tk.DTYPE).reshape(1, -1)
        self.w = cfg_weight
        self.nonhuman_seed = nonhuman_seed

    @staticmethod
    def _row(e) -> np.ndarray:
        return np.asarray(e, dtype=tk.DTYPE).reshape(1, -1)

    def _guidance(self, with_uncond: bool):
        def build(e):
            return np.concatenate([self.uncond, self._row(e)]) if with_uncond else self._row(e)
        if isinstance(self.cond, GuidanceSet):
            return GuidanceSet([build(e) for e in self.cond.embeddings], self.cond.masks)
        return build(self.cond)

    def eps(self, x: np.ndarray, i: int) -> np.ndarray:
        sigma = self.schedule.sigmas[i]
        t = int(self.schedule.timesteps[i])
        z_in = (x / math.sqrt(sigma ** 2 + 1.0)).astype(tk.DTYPE)
        if self.w == 1.0:
            # plain conditional prediction, no unconditional pass needed
            return self.unet.predict(z_in, t, self._guidance(False), self.nonhuman_seed)
        both = self.unet.predict(np.concatenate([z_in, z_in]), t, self._guidance(True), self.nonhuman_seed)
        return cfg_combine(both[:1], both[1:], self.w)


def euler_ancestral(eps_fn, x: np.ndarray, sigmas: np.ndarray, rng: np.random.Generator,
                    start: int = 0, fixed=None) -> np.ndarray:
    """Run grid positions start..len(sigmas)-2. ``eps_fn(x, i)`` predicts noise at sigmas[i].

    ``fixed``: optional (base_image, keep_mask) - pixels in keep_mask are reset
    to base_image noised to the current sigma after every step.
    """
    x = np.asarray(x, dtype=np.float64)
    for i in range(start, len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        denoised = x - s * eps_fn(x.astype(tk.DTYPE), i)
        s_down, s_up = ancestral_step(s, s_next)
        x = x + (s_down - s) * (x - denoised) / s
        noise = rng.standard_normal(x.shape)
        if s_next > 0:
            x = x + s_up * noise
        if fixed is not None:
            base, keep = fixed
            x = np.where(keep, base + s_next * rng.standard_normal(x.shape), x)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"sampler diverged at step {i}")
    return x


def sample_euler_ancestral(config: SamplerConfig, guidance, schedule: NoiseSchedule, unet: UNetLite,
                           uncond: np.ndarray, init_image: np.ndarray | None = None,
                           fixed_base: np.ndarray | None = None) -> np.ndarray:
    """Generate one image [3,24,24] in [0,1].

    ``guidance`` is e_g [64] or a GuidanceSet (multi-identity routing at the
    bottleneck). ``uncond`` is the e_g of the all-dropped bundle.
    """
    if config.steps != schedule.steps:
        raise ValueError(f"sampler config asks for {config.steps} steps, schedule has {schedule.steps}")
    rng = np.random.default_rng([config.seed, 5])
    den = Denoiser(unet, schedule, guidance, uncond, config.cfg_weight, nonhuman_seed=config.seed)
    if init_image is not None:
        x, start = img2img_init(init_image[None], config.img2img_strength, schedule, config.seed)
    else:
        x = rng.standard_normal((1, 3, CANVAS, CANVAS)) * schedule.sigmas[0]
        start = 0
    fixed = None
    if config.nonhuman == "fixed" and isinstance(guidance, GuidanceSet):
        if fixed_base is None:
            raise ValueError("fixed non-human regions need a base image")
        fixed = (np.asarray(fixed_base, dtype=np.float64)[None], _nonhuman_pixels(guidance))
    out = euler_ancestral(den.eps, x, schedule.sigmas, rng, start=start, fixed=fixed)
    return np.clip(out[0], 0.0, 1.0).astype(tk.DTYPE)


def _nonhuman_pixels(gs: GuidanceSet) -> np.ndarray:
    covered = np.zeros_like(np.asarray(gs.masks[0], dtype=bool))
    for m in gs.masks:
        covered |= np.asarray(m, dtype=bool)
    factor = CANVAS // covered.shape[0]
    full = np.kron(covered, np.ones((factor, factor), dtype=bool))
    return ~full[None, None]
