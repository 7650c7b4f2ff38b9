#!/usr/bin/env python3
"""Ablation table of a trained run at several classifier-free guidance weights."""
import argparse

from idsynth.config import RunConfig, apply_overrides, load_config
from idsynth.evalharness import METHOD_IMAGE, METHOD_NO_ID, METHOD_TEXT, run_ablation
from idsynth.pipeline import Generator


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="RunConfig JSON (default: reference settings)")
    p.add_argument("--weights", default="1,2,3,5", help="comma-separated CFG weights")
    p.add_argument("--seeds", type=int, default=4, help="seeds per held-out identity")
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    cfg = apply_overrides(cfg, {"eval.seeds_per_identity": args.seeds})
    gen = Generator.load(cfg)
    print("w      image   text    no-ID")
    for w in (float(x) for x in args.weights.split(",")):
        gen.cfg = apply_overrides(cfg, {"sample.cfg_weight": w})
        rep = run_ablation(gen)
        sims = [rep.row(m).single_image_sim for m in (METHOD_IMAGE, METHOD_TEXT, METHOD_NO_ID)]
        print(f"{w:<6g} " + "  ".join(f"{s:6.3f}" for s in sims), flush=True)


if __name__ == "__main__":
    main()
