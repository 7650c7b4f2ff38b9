"""End-to-end orchestration: dataset, training of each component, checkpoints
on disk, and guided generation from a trained run directory."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion as dif
from .attention import GuidanceSet, downsample_masks
from .avatargen import (CANONICAL_STYLE, MASK_FILL, AvatarSample, IdentitySpec, StyleSpec, dataset_stream,
                        make_multi_human, render_avatar, split_pool)
from .checkpoint import load_checkpoint, prefixed, save_checkpoint, unprefixed
from .config import RunConfig
from .encoders import (IdentityEncoder, PriorNet, TextEncoder, VisionEncoder, prior_mse, prior_pairs,
                       train_identity_encoder, train_prior)
from .guidance import FusionLayer, GuidanceBundle, make_bundle, unconditional_bundle

log = logging.getLogger(__name__)

CKPT_ENCODERS = "encoders.idg"
CKPT_ID = "id_encoder.idg"
CKPT_PRIOR = "prior.idg"
CKPT_DIFFUSION = "diffusion.idg"
COMPONENTS = ("id-encoder", "prior", "diffusion")


class MissingArtifact(FileNotFoundError):
    pass


# per-component seed streams, all derived from dataset.seed
def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.dataset.seed, stream])


def build_samples(cfg: RunConfig) -> list[AvatarSample]:
    d = cfg.dataset
    return list(dataset_stream(d.seed, d.n, d.num_identities, d.num_heldout, d.nonhuman_fraction))


def identity_split(cfg: RunConfig) -> tuple[list[IdentitySpec], list[IdentitySpec]]:
    d = cfg.dataset
    return split_pool(d.seed, d.num_identities, d.num_heldout)


def schedule_for(cfg: RunConfig) -> dif.NoiseSchedule:
    s = cfg.schedule
    return dif.build_schedule(s.T, s.beta_start, s.beta_end, cfg.sample.steps)


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

def prepare_run_dir(cfg: RunConfig) -> Path:
    run = cfg.run_dir()
    (run / "ckpt").mkdir(parents=True, exist_ok=True)
    (run / "logs").mkdir(exist_ok=True)
    (run / "config_hash.txt").write_text(cfg.training_hash() + "\n")
    # the runs root is where the directory lives, not what it holds
    settings = {k: v for k, v in cfg.to_dict().items() if k != "paths"}
    (run / "config.json").write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")
    return run


def write_loss_csv(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, f"{v:.8f}"])


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path} ({hint})")
    return path


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def frozen_encoders(cfg: RunConfig) -> tuple[VisionEncoder, TextEncoder]:
    vision = VisionEncoder(_rng(cfg, 10)).freeze()
    text = TextEncoder(_rng(cfg, 11)).freeze()
    return vision, text


def train_id_component(cfg: RunConfig, samples: Sequence[AvatarSample], run: Path) -> IdentityEncoder:
    t = cfg.train
    enc, losses = train_identity_encoder(samples, t.id_epochs, _rng(cfg, 12), lr=t.id_lr)
    vision, text = frozen_encoders(cfg)
    save_checkpoint(run / "ckpt" / CKPT_ENCODERS,
                    {**prefixed("vision", vision.state_dict()), **prefixed("text", text.state_dict())})
    save_checkpoint(run / "ckpt" / CKPT_ID, prefixed("identity", enc.state_dict()))
    write_loss_csv(run / "logs" / "id-encoder_loss.csv", losses)
    return enc.freeze()


def train_prior_component(cfg: RunConfig, samples: Sequence[AvatarSample], run: Path) -> PriorNet:
    vision, text = load_frozen_encoders(run)
    human = [s for s in samples if s.is_human]
    text_emb, vis_emb = prior_pairs(human, vision, text)
    prior, losses = train_prior(text_emb, vis_emb, cfg.train.prior_epochs, _rng(cfg, 13), lr=cfg.train.prior_lr)
    log.info("prior train mse %.4f", prior_mse(prior, text_emb, vis_emb))
    save_checkpoint(run / "ckpt" / CKPT_PRIOR, prefixed("prior", prior.state_dict()))
    write_loss_csv(run / "logs" / "prior_loss.csv", losses)
    return prior.freeze()


def train_diffusion_component(cfg: RunConfig, samples: Sequence[AvatarSample], run: Path,
                              callback=None) -> tuple[dif.UNetLite, FusionLayer]:
    vision, _ = load_frozen_encoders(run)
    identity = load_identity_encoder(run)
    t = cfg.train
    unet = dif.UNetLite(_rng(cfg, 14), c1=t.unet_width, c2=t.unet_mid_width, sigma_data=t.sigma_data,
                        alpha_bar=schedule_for(cfg).alpha_bar)
    fusion = FusionLayer(_rng(cfg, 15), id_gain=t.fusion_id_gain)
    models = dif.DiffusionModels(unet, fusion, vision, identity)
    tcfg = dif.TrainConfig(steps=t.steps, batch=t.batch, lr=t.lr, lr_final_frac=t.lr_final_frac,
                           p_style=t.p_style, p_face=t.p_face, seed=cfg.dataset.seed)
    curve = dif.train_diffusion(samples, models, schedule_for(cfg), tcfg, callback=callback)
    save_checkpoint(run / "ckpt" / CKPT_DIFFUSION,
                    {**prefixed("unet", unet.state_dict()), **prefixed("fusion", fusion.state_dict())})
    write_loss_csv(run / "logs" / "diffusion_loss.csv", [l for _, l in curve])
    return unet, fusion


def train_all(cfg: RunConfig, components: Sequence[str] = COMPONENTS) -> Path:
    run = prepare_run_dir(cfg)
    t0 = time.perf_counter()
    samples = build_samples(cfg)
    timing_path = run / "logs" / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    timing["dataset"] = time.perf_counter() - t0
    for comp in components:
        log.info("training %s", comp)
        t0 = time.perf_counter()
        if comp == "id-encoder":
            train_id_component(cfg, samples, run)
        elif comp == "prior":
            train_prior_component(cfg, samples, run)
        elif comp == "diffusion":
            train_diffusion_component(cfg, samples, run)
        else:
            raise ValueError(f"unknown component {comp!r} (expected one of {COMPONENTS})")
        timing[comp] = time.perf_counter() - t0
    # wall-clock seconds; kept apart from checkpoints so those stay reproducible
    timing_path.write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return run


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_frozen_encoders(run: Path) -> tuple[VisionEncoder, TextEncoder]:
    state = load_checkpoint(_require(run / "ckpt" / CKPT_ENCODERS, "run `train id-encoder` first"))
    rng = np.random.default_rng(0)
    vision, text = VisionEncoder(rng), TextEncoder(rng)
    vision.load_state_dict(unprefixed("vision", state))
    text.load_state_dict(unprefixed("text", state))
    return vision.freeze(), text.freeze()


def load_identity_encoder(run: Path) -> IdentityEncoder:
    state = unprefixed("identity", load_checkpoint(_require(run / "ckpt" / CKPT_ID, "run `train id-encoder` first")))
    enc = IdentityEncoder(np.random.default_rng(0), num_classes=state["head.weight"].shape[1])
    enc.load_state_dict(state)
    return enc.freeze()


def load_prior(run: Path) -> PriorNet:
    state = load_checkpoint(_require(run / "ckpt" / CKPT_PRIOR, "run `train prior` first"))
    prior = PriorNet(np.random.default_rng(0))
    prior.load_state_dict(unprefixed("prior", state))
    return prior.freeze()


def load_diffusion(run: Path, cfg: RunConfig) -> tuple[dif.UNetLite, FusionLayer]:
    state = load_checkpoint(_require(run / "ckpt" / CKPT_DIFFUSION, "run `train diffusion` first"))
    rng = np.random.default_rng(0)
    # widths are read back from the stored tensors
    c1, c2 = state["unet.conv_in.weight"].shape[0], state["unet.down1.weight"].shape[0]
    unet = dif.UNetLite(rng, c1=c1, c2=c2, sigma_data=cfg.train.sigma_data, alpha_bar=schedule_for(cfg).alpha_bar)
    fusion = FusionLayer(rng)
    unet.load_state_dict(unprefixed("unet", state))
    fusion.load_state_dict(unprefixed("fusion", state))
    return unet.freeze(), fusion.freeze()


@dataclass
class Generator:
    """Everything needed for inference, loaded from one run directory."""

    cfg: RunConfig
    vision: VisionEncoder
    text: TextEncoder
    identity: IdentityEncoder
    prior: PriorNet
    unet: dif.UNetLite
    fusion: FusionLayer
    schedule: dif.NoiseSchedule
    train_ids: list
    heldout_ids: list

    @classmethod
    def load(cls, cfg: RunConfig) -> "Generator":
        run = cfg.run_dir()
        vision, text = load_frozen_encoders(run)
        train_ids, heldout = identity_split(cfg)
        overlap = set(train_ids) & set(heldout)
        assert not overlap, f"held-out identities overlap the training pool: {overlap}"
        return cls(cfg, vision, text, load_identity_encoder(run), load_prior(run), *load_diffusion(run, cfg),
                   schedule_for(cfg), train_ids, heldout)

    @property
    def uncond(self) -> np.ndarray:
        return unconditional_bundle(self.fusion).e_g

    # -- conditioning --------------------------------------------------------
    def face_embedding(self, crops) -> np.ndarray:
        return self.identity.encode(crops)

    def text_embedding(self, tokens: Sequence[int]) -> np.ndarray:
        """Text tokens mapped through the prior into vision-embedding space."""
        return self.prior.encode(self.text.encode(list(tokens)))

    def bundle(self, e_f, style_image: np.ndarray | None = None, tokens: Sequence[int] | None = None,
               alpha: float = 1.0) -> GuidanceBundle:
        e_h = self.vision.encode(style_image) if style_image is not None else None
        e_T = self.text_embedding(tokens) if tokens is not None else None
        return make_bundle(self.fusion, e_f, e_h=e_h, e_T=e_T, alpha=alpha)

    # -- sampling ------------------------------------------------------------
    def sample(self, guidance, seed: int, cfg_weight: float | None = None, init_image=None,
               strength: float = 1.0, nonhuman: str = "random", fixed_base=None) -> np.ndarray:
        mode = "img2img" if init_image is not None else ("multi" if isinstance(guidance, GuidanceSet) else "guided")
        sc = dif.SamplerConfig(steps=self.schedule.steps,
                               cfg_weight=self.cfg.sample.cfg_weight if cfg_weight is None else cfg_weight,
                               img2img_strength=strength, seed=seed, mode=mode, nonhuman=nonhuman)
        return dif.sample_euler_ancestral(sc, guidance, self.schedule, self.unet, self.uncond,
                                          init_image=init_image, fixed_base=fixed_base)

    def multi_guidance(self, identities: Sequence[IdentitySpec], styles: Sequence[StyleSpec],
                       face_crops: Sequence[np.ndarray] | None = None) -> tuple[GuidanceSet, AvatarSample]:
        """Per-identity guidance routed through the instance masks of a composite layout."""
        comp = make_multi_human(identities, styles)
        style_image = masked_style_image(comp)
        e_h = self.vision.encode(style_image)
        if face_crops is None:
            face_crops = [reference_crop(i) for i in identities]
        embs = [make_bundle(self.fusion, self.identity.encode(c), e_h=e_h).e_g for c in face_crops]
        factor = comp.image.shape[-1] // 6
        return GuidanceSet(embs, downsample_masks(comp.instance_masks, factor)), comp


def masked_style_image(sample: AvatarSample) -> np.ndarray:
    img = sample.image.copy()
    for m in sample.instance_masks or [sample.face_mask]:
        img[:, m] = MASK_FILL
    return img


def reference_crop(identity: IdentitySpec, style: StyleSpec = CANONICAL_STYLE) -> np.ndarray:
    return render_avatar(identity, style).face_crop
