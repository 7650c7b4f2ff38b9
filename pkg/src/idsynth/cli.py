"""Command-line entry point.

    idsynth [options] gen-data
    idsynth [options] train {id-encoder,prior,diffusion,all}
    idsynth [options] sample [--alpha A] [--mix ID:W,...] [--multi SPEC] [--img2img PATH --strength S]
    idsynth [options] eval
    idsynth [options] report

Exit codes: 0 success, 1 validation error, 2 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .avatargen import StyleSpec, random_style, render_avatar
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .guidance import MixWeights, mix_identities
from .pipeline import COMPONENTS, Generator, MissingArtifact, build_samples, masked_style_image, prepare_run_dir, \
    train_all

log = logging.getLogger("idsynth")

EXIT_OK, EXIT_INVALID, EXIT_MISSING = 0, 1, 2

# flag -> dotted config key
FLAG_KEYS = {
    "seed": "dataset.seed", "n": "dataset.n", "num_identities": "dataset.num_identities",
    "num_heldout": "dataset.num_heldout", "nonhuman_fraction": "dataset.nonhuman_fraction",
    "lr": "train.lr", "batch": "train.batch", "steps": "train.steps",
    "id_epochs": "train.id_epochs", "prior_epochs": "train.prior_epochs",
    "T": "schedule.T", "beta_start": "schedule.beta_start", "beta_end": "schedule.beta_end",
    "sample_steps": "sample.steps", "cfg_weight": "sample.cfg_weight", "alpha": "sample.alpha",
    "strength": "sample.strength", "sample_seed": "sample.seed",
    "eval_seeds": "eval.seeds_per_identity", "eval_seed": "eval.seed",
    "runs_root": "paths.runs_root",
}


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subparser from resetting flags given before the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", type=Path, help="RunConfig JSON file")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="dataset size")
    g.add_argument("--num-identities", type=int)
    g.add_argument("--num-heldout", type=int)
    g.add_argument("--nonhuman-fraction", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--steps", type=int, help="diffusion training steps")
    g.add_argument("--id-epochs", type=int)
    g.add_argument("--prior-epochs", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--beta-start", type=float)
    g.add_argument("--beta-end", type=float)
    g.add_argument("--sample-steps", type=int)
    g.add_argument("--cfg-weight", type=float)
    g.add_argument("--sample-seed", type=int)
    g.add_argument("--eval-seeds", type=int, help="seeds per held-out identity")
    g.add_argument("--eval-seed", type=int)
    g.add_argument("--runs-root", type=str)
    g.add_argument("-q", "--quiet", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog="idsynth", description="Identity-guided avatar diffusion.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the dataset manifest and previews")

    t = sub.add_parser("train", parents=[common], help="train a component")
    t.add_argument("component", choices=COMPONENTS + ("all",))

    s = sub.add_parser("sample", parents=[common], help="generate an image")
    s.add_argument("--identity", default="h0", help="face identity: hK (held-out) or tK (training)")
    s.add_argument("--style-seed", type=int, default=0, help="seed of the random style to render")
    s.add_argument("--alpha", type=float, help="1 = image branch, 0 = text branch")
    s.add_argument("--mix", help='identity mixing, e.g. "h0:0.7,h1:0.3"')
    s.add_argument("--multi", help='one face per region, e.g. "h0@0.3,0.5,0.3;h1@0.7,0.5,0.3" (id@x,y,scale)')
    s.add_argument("--img2img", type=Path, help="PPM image to start from")
    s.add_argument("--strength", type=float)
    s.add_argument("--nonhuman", choices=("random", "fixed"), default="random")
    s.add_argument("--out", type=Path, help="output PPM (default: inside the run directory)")

    sub.add_parser("eval", parents=[common], help="run the ablation and write report files")
    sub.add_parser("report", parents=[common], help="print the stored ablation table")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else RunConfig().validate()
    overrides = {key: getattr(args, flag, None) for flag, key in FLAG_KEYS.items()}
    return apply_overrides(cfg, overrides)


def _stamp(out_dir: Path, cfg: RunConfig) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_hash.txt").write_text(cfg.training_hash() + "\n")
    return out_dir


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    run = prepare_run_dir(cfg)
    out = _stamp(run / "data", cfg)
    samples = build_samples(cfg)
    manifest = []
    for i, s in enumerate(samples):
        manifest.append({"index": i, "label": s.labels[0] if s.labels else None,
                         "bg_hue": s.style.bg_hue, "face_center": list(s.style.face_center),
                         "face_scale": s.style.face_scale, "accessory": s.style.accessory,
                         "tokens": s.style_tokens})
        if i < 8:
            imageio.write_ppm(out / f"preview_{i:02d}.ppm", s.image)
            imageio.write_pgm(out / f"preview_{i:02d}_mask.pgm", s.face_mask)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(manifest)} samples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    comps = COMPONENTS if args.component == "all" else (args.component,)
    run = train_all(cfg, comps)
    print(f"trained {', '.join(comps)} in {run}")
    return EXIT_OK


def parse_identity(spec: str, gen: Generator):
    spec = spec.strip()
    pools = {"h": gen.heldout_ids, "t": gen.train_ids}
    if spec[:1] in pools and spec[1:].isdigit():
        pool, k = pools[spec[0]], int(spec[1:])
    elif spec.isdigit():
        pool, k = gen.train_ids, int(spec)
    else:
        raise ValueError(f"bad identity {spec!r}: expected hK or tK")
    if k >= len(pool):
        raise ValueError(f"identity {spec!r} out of range (pool has {len(pool)})")
    return pool[k]


def parse_mix(spec: str, gen: Generator, default_weights) -> tuple[list, MixWeights]:
    ids, weights = [], []
    for part in spec.split(","):
        name, _, w = part.partition(":")
        ids.append(parse_identity(name, gen))
        weights.append(float(w) if w else None)
    if any(w is None for w in weights):
        if not default_weights or len(default_weights) != len(ids):
            raise ValueError("--mix without weights needs sample.beta_weights of matching length")
        weights = list(default_weights)
    return ids, MixWeights(tuple(weights))


def parse_multi(spec: str, gen: Generator, base: StyleSpec):
    ids, styles = [], []
    for part in spec.split(";"):
        name, sep, geo = part.partition("@")
        if not sep:
            raise ValueError(f"bad --multi entry {part!r}: expected id@x,y,scale")
        try:
            x, y, sc = (float(v) for v in geo.split(","))
        except ValueError:
            raise ValueError(f"bad --multi geometry {geo!r}: expected x,y,scale") from None
        ids.append(parse_identity(name, gen))
        styles.append(StyleSpec(base.bg_hue, (x, y), sc, "none"))
    return ids, styles


def cmd_sample(cfg: RunConfig, args) -> int:
    gen = Generator.load(cfg)
    sc = cfg.sample
    style = random_style(np.random.default_rng([args.style_seed, 400]))
    out_dir = _stamp(cfg.run_dir() / "samples", cfg)
    stem = f"sample_s{sc.seed}_st{args.style_seed}"
    info: dict = {"seed": sc.seed, "cfg_weight": sc.cfg_weight, "style": style.style_tokens}

    if args.multi:
        ids, styles = parse_multi(args.multi, gen, style)
        gs, comp = gen.multi_guidance(ids, styles)
        img = gen.sample(gs, seed=sc.seed, nonhuman=args.nonhuman, fixed_base=comp.image)
        info.update(mode="multi", identities=len(ids), nonhuman=args.nonhuman)
        for i, m in enumerate(comp.instance_masks):
            imageio.write_pgm(out_dir / f"{stem}_multi_mask{i}.pgm", m)
        stem += "_multi"
    else:
        if args.mix:
            ids, weights = parse_mix(args.mix, gen, sc.beta_weights)
            crops = [render_avatar(i, random_style(np.random.default_rng([args.style_seed, 401, k]))).face_crop
                     for k, i in enumerate(ids)]
            e_f = mix_identities(list(gen.face_embedding(np.stack(crops))), weights)
            info["mix"] = list(weights.beta)
            ident = ids[0]
        else:
            ident = parse_identity(args.identity, gen)
            face_style = random_style(np.random.default_rng([args.style_seed, 401, 0]))
            e_f = gen.face_embedding(render_avatar(ident, face_style).face_crop)
        init = None
        if args.img2img:
            if not args.img2img.exists():
                raise MissingArtifact(f"img2img input not found: {args.img2img}")
            init = imageio.read_ppm(args.img2img)
            style_image = init
        else:
            style_image = masked_style_image(render_avatar(ident, style))
        bundle = gen.bundle(e_f, style_image=style_image, tokens=style.style_tokens, alpha=sc.alpha)
        branch = {1.0: "image", 0.0: "text"}.get(sc.alpha, "hybrid")
        info.update(mode="img2img" if init is not None else "guided", alpha=sc.alpha, branch=branch,
                    e_g_equals_e_i=bool(np.array_equal(bundle.e_g, bundle.e_i)),
                    e_g_equals_e_p=bool(np.array_equal(bundle.e_g, bundle.e_p)),
                    dropped_style=bundle.dropped_style, dropped_face=bundle.dropped_face)
        img = gen.sample(bundle.e_g, seed=sc.seed, init_image=init, strength=sc.strength)
        if init is not None:
            info["strength"] = sc.strength
            stem += f"_img2img{sc.strength:g}"
        else:
            stem += f"_a{sc.alpha:g}"
    path = args.out or out_dir / f"{stem}.ppm"
    imageio.write_ppm(path, img)
    info["output"] = str(path)
    log.info("bundle %s", json.dumps(info, sort_keys=True))
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .evalharness import identity_swap, img2img_layout, run_ablation

    gen = Generator.load(cfg)
    out = _stamp(cfg.run_dir() / "eval" / cfg.section_hash("sample", "eval"), cfg)
    images = out / "images"
    images.mkdir(exist_ok=True)

    def keep(rec, img):
        tag = {"Ours w/ image": "image", "Ours w/ text": "text"}.get(rec.method, "noid")
        imageio.write_ppm(images / f"{tag}_h{rec.identity}_{rec.seed}.ppm", img)

    report = run_ablation(gen, on_image=keep)
    (out / "report.csv").write_text(report.to_csv())
    (out / "similarities.csv").write_text(report.records_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    swap = identity_swap(gen)
    i2i = img2img_layout(gen)
    extra = (f"identity_swap,{swap.wins},{swap.trials},{swap.rate:.4f}\n"
             f"img2img_mse,{i2i.low_strength},{i2i.mean_low:.8f},{i2i.high_strength},{i2i.mean_high:.8f}\n")
    (out / "checks.csv").write_text(extra)
    (cfg.run_dir() / "eval" / "latest").write_text(out.name + "\n")
    print(report.table())
    print(f"identity swap: {swap.wins}/{swap.trials} ({swap.rate:.0%})")
    print(f"img2img MSE: strength {i2i.low_strength} -> {i2i.mean_low:.4f}, "
          f"strength {i2i.high_strength} -> {i2i.mean_high:.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    from .evalharness import parse_report_csv

    latest = cfg.run_dir() / "eval" / "latest"
    if not latest.exists():
        raise MissingArtifact(f"no evaluation found under {cfg.run_dir()} (run `eval` first)")
    path = cfg.run_dir() / "eval" / latest.read_text().strip() / "report.txt"
    if not path.exists():
        raise MissingArtifact(f"missing report {path}")
    rows = parse_report_csv((path.parent / "report.csv").read_text())
    print(path.read_text(), end="")
    log.debug("%d rows", len(rows))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
