"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL line
in the terminal summary.

Criteria 6-8 need the reference run. Its checkpoints are cached under
``$IDG_RUNS_ROOT`` (default: ``runs/`` at the repository root), keyed by the
training hash; the first invocation trains it (about 25 minutes on one core).
"""
import csv
import io
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from idsynth import tensorkit as tk
from idsynth.attention import AttentionParams, GuidanceSet, cross_attention, multi_identity_cross_attention
from idsynth.cli import main as cli_main
from idsynth.config import apply_overrides, reference_config, tiny_config
from idsynth.diffusion import UNetLite, build_schedule, euler_ancestral, q_sample, sample_euler_ancestral, \
    SamplerConfig
from idsynth.evalharness import METHOD_IMAGE, METHOD_NO_ID, METHOD_TEXT, identity_swap, img2img_layout, run_ablation
from idsynth.gradcheck import OP_CASES, check_all
from idsynth.guidance import FusionLayer, MixWeights, blend, cfg_dropout, make_bundle, mix_identities
from idsynth.nn import l2_normalize
from idsynth.pipeline import CKPT_DIFFUSION, CKPT_ENCODERS, CKPT_ID, CKPT_PRIOR, Generator, train_all
from idsynth.tensorkit import Tensor

REPO = Path(__file__).resolve().parents[1]
RUNS_ROOT = Path(os.environ.get("IDG_RUNS_ROOT", REPO / "runs"))


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_autodiff_soundness(criterion):
    with criterion(1, "finite-difference gradchecks, every op, 5 seeds, < 30 s") as c:
        t0 = time.perf_counter()
        results = check_all(range(5))
        dt = time.perf_counter() - t0
        bad = [f"{r.op}/{r.seed}" for r in results if not r.ok]
        c.note(f"{len(results) - len(bad)}/{len(results)} checks over {len(OP_CASES)} ops")
        c.note(f"max abs err {max(r.max_abs_err for r in results):.1e}")
        c.note(f"{dt:.1f} s")
        assert not bad, f"failing: {bad}"
        assert dt < 30


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_region_independence(criterion):
    with criterion(2, "multi-identity attention region independence, < 5 s") as c:
        t0 = time.perf_counter()
        C = 64
        params = AttentionParams(np.random.default_rng(0), C)
        rng = np.random.default_rng(1)
        left = np.zeros((6, 6), dtype=bool)
        left[:, :3] = True
        right = ~left
        bitwise = zero_grads = 0
        trials = 20
        for _ in range(trials):
            F = rng.standard_normal((1, 36, C)).astype(np.float32)
            e = [rng.standard_normal((1, 64)).astype(np.float32) for _ in range(2)]
            base = multi_identity_cross_attention(Tensor(F), GuidanceSet(e, [left, right]), params).data
            for j, other in ((0, right), (1, left)):
                pert = list(e)
                pert[j] = pert[j] + rng.standard_normal((1, 64)).astype(np.float32)
                out = multi_identity_cross_attention(Tensor(F), GuidanceSet(pert, [left, right]), params).data
                rows = other.reshape(-1)
                bitwise += out[0, rows].tobytes() == base[0, rows].tobytes()

                leaves = [Tensor(x, requires_grad=True) for x in e]
                o = multi_identity_cross_attention(Tensor(F), GuidanceSet(leaves, [left, right]), params)
                pick = np.zeros(o.shape, dtype=np.float32)
                pick[0, rows] = rng.standard_normal((int(rows.sum()), C))
                (o * Tensor(pick)).sum().backward()
                g = leaves[j].grad
                zero_grads += g is None or not g.any()
        F = rng.standard_normal((2, 36, C)).astype(np.float32)
        e = rng.standard_normal((2, 64)).astype(np.float32)
        routed = multi_identity_cross_attention(Tensor(F), GuidanceSet([e], [np.ones((6, 6), bool)]), params).data
        dense_err = float(np.abs(routed - cross_attention(Tensor(F), e, params).data).max())
        dt = time.perf_counter() - t0
        c.note(f"bitwise unchanged {bitwise}/{2 * trials}")
        c.note(f"exact-zero grads {zero_grads}/{2 * trials}")
        c.note(f"N=1 vs dense max err {dense_err:.1e}")
        c.note(f"{dt:.2f} s")
        assert bitwise == 2 * trials and zero_grads == 2 * trials
        assert dense_err <= 1e-5
        assert dt < 5


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_guidance_algebra(criterion):
    with criterion(3, "blend endpoints, shared fusion, mixing endpoint, cosine monotonicity") as c:
        rng = np.random.default_rng(3)
        layer = FusionLayer(rng)
        ok_blend = ok_shared = ok_mix = ok_mono = 0
        trials = 50
        for _ in range(trials):
            e_f = l2_normalize(rng.standard_normal(32))
            e_h, e_T = rng.standard_normal(64), rng.standard_normal(64)
            b = make_bundle(layer, e_f, e_h=e_h, e_T=e_T)
            ok_blend += (blend(b.e_i, b.e_p, 1.0).tobytes() == b.e_i.tobytes()
                         and blend(b.e_i, b.e_p, 0.0).tobytes() == b.e_p.tobytes())
            same = make_bundle(layer, e_f, e_h=e_h, e_T=e_h.copy(), alpha=float(rng.uniform()))
            ok_shared += same.e_i.tobytes() == same.e_p.tobytes()
            e1, e2 = l2_normalize(rng.standard_normal(32)), l2_normalize(rng.standard_normal(32))
            ok_mix += mix_identities([e1, e2], MixWeights((1.0, 0.0))).tobytes() == e1.astype(np.float32).tobytes()
            if e1 @ e2 < 0:
                e2 = -e2
            sims = []
            for beta in np.linspace(0.0, 1.0, 11):
                m = mix_identities([e1, e2], MixWeights((float(beta), float(1.0 - beta)))).astype(np.float64)
                sims.append(m @ e1 / np.linalg.norm(m))
            ok_mono += all(y >= x - 1e-7 for x, y in zip(sims, sims[1:]))
        c.note(f"blend {ok_blend}/{trials}, shared {ok_shared}/{trials}, mix {ok_mix}/{trials}, "
               f"monotone {ok_mono}/{trials} (11-point sweeps)")
        assert ok_blend == ok_shared == ok_mix == ok_mono == trials


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_cfg_dropout_rates(criterion):
    with criterion(4, "CFG dropout rates over 10,000 draws") as c:
        layer = FusionLayer(np.random.default_rng(0))
        base = make_bundle(layer, l2_normalize(np.ones(32)), e_h=np.ones(64))
        rng = np.random.default_rng(4)
        n = 10_000
        drops = [cfg_dropout(base, rng) for _ in range(n)]
        style = sum(d.dropped_style for d in drops) / n
        face = sum(d.dropped_face for d in drops) / n
        c.note(f"style {style:.4f} (0.64 +- 0.02), face {face:.4f} (0.10 +- 0.01)")
        assert abs(style - 0.64) <= 0.02
        assert abs(face - 0.10) <= 0.01


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_schedule_and_sampler(criterion):
    with criterion(5, "schedule oracle, q_sample variance, sampler fixed point and determinism") as c:
        s = build_schedule()
        ab = s.alpha_bar
        monotone = bool((np.diff(ab) < 0).all())
        prod, oracle = 1.0, []
        for i in range(s.T):
            root = 8.5e-4 ** 0.5 + (1.2e-2 ** 0.5 - 8.5e-4 ** 0.5) * i / (s.T - 1)
            prod *= 1.0 - root * root
            oracle.append(prod)
        oracle_err = float(np.abs(ab - np.array(oracle)).max())

        rng = np.random.default_rng(5)
        worst_var = 0.0
        for t in (1, 100, 500, 900, 1000):
            z = q_sample(np.full(50_000, 0.4), t, rng.standard_normal(50_000), s).astype(np.float64)
            worst_var = max(worst_var, abs(z.var() / (1 - s.ab(t)) - 1))

        z0 = rng.uniform(size=(1, 3, 24, 24))
        x = z0 + s.sigmas[0] * rng.standard_normal(z0.shape)
        fixed = euler_ancestral(lambda x, i: (x - z0) / s.sigmas[i], x, s.sigmas, np.random.default_rng(6))
        fp_err = float(np.abs(fixed - z0).max())

        unet = UNetLite(np.random.default_rng(0), c1=4, c2=8, t_dim=8, d=8)
        for p in unet.parameters():
            p.data = p.data + 0.02
        g = rng.standard_normal(64).astype(np.float32)
        a = sample_euler_ancestral(SamplerConfig(seed=9), g, s, unet, np.zeros(64))
        b = sample_euler_ancestral(SamplerConfig(seed=9), g, s, unet, np.zeros(64))
        det = a.tobytes() == b.tobytes()
        c.note(f"monotone {monotone}, oracle err {oracle_err:.1e}, worst var dev {worst_var:.3f}, "
               f"fixed-point err {fp_err:.1e}, deterministic {det}")
        assert monotone and oracle_err <= 1e-9
        assert worst_var < 0.05
        assert fp_err < 1e-5 and det


# -- 6-8: the reference run --------------------------------------------------

def _reference_ready(cfg) -> bool:
    ck = cfg.run_dir() / "ckpt"
    return all((ck / n).exists() for n in (CKPT_ENCODERS, CKPT_ID, CKPT_PRIOR, CKPT_DIFFUSION))


@pytest.fixture(scope="module")
def reference():
    cfg = apply_overrides(reference_config(), {"paths.runs_root": str(RUNS_ROOT)})
    if not _reference_ready(cfg):
        train_all(cfg)
    timing = json.loads((cfg.run_dir() / "logs" / "timing.json").read_text())
    return Generator.load(cfg), timing


@pytest.fixture(scope="module")
def ablation(reference):
    gen, _ = reference
    return run_ablation(gen)


def test_criterion_6_ablation_ordering(criterion, reference, ablation):
    with criterion(6, "reference run: image > text > no-ID, gaps >= 0.05, image >= 0.6, tuning 0") as c:
        gen, timing = reference
        train_s = sum(timing.values())
        img = ablation.row(METHOD_IMAGE).single_image_sim
        txt = ablation.row(METHOD_TEXT).single_image_sim
        noid = ablation.row(METHOD_NO_ID).single_image_sim
        tune = [r.tuning_time_s for r in ablation.rows]
        c.note(f"image {img:.3f}, text {txt:.3f}, no-ID {noid:.3f}")
        c.note(f"{ablation.sample_count} images/method")
        c.note(f"{gen.cfg.train.steps} steps, train {train_s / 60:.1f} min")
        assert gen.cfg.dataset.num_identities == 16 and gen.cfg.train.steps <= 5000
        assert train_s < 30 * 60
        assert all(t == 0 for t in tune)
        assert img - txt >= 0.05 and txt - noid >= 0.05
        assert img >= 0.6


def test_criterion_7_identity_swap(criterion, reference):
    with criterion(7, "identity swap on 50 held-out triples, >= 80%") as c:
        gen, _ = reference
        res = identity_swap(gen, trials=50)
        c.note(f"{res.wins}/{res.trials} = {res.rate:.0%}, median margin {np.median(res.margins):+.3f}")
        assert res.trials == 50
        assert res.rate >= 0.8


def test_criterion_8_img2img_layout(criterion, reference):
    with criterion(8, "img2img MSE at strength 0.3 < strength 1.0, 20 paired seeds") as c:
        gen, _ = reference
        res = img2img_layout(gen, seeds=20, low=0.3, high=1.0)
        c.note(f"mean MSE {res.mean_low:.4f} vs {res.mean_high:.4f}")
        assert len(res.mse_low) == 20
        assert res.mean_low < res.mean_high


# -- 9 -----------------------------------------------------------------------

def _pipeline(root: Path) -> Path:
    root.mkdir(parents=True)
    cfg = tiny_config(str(root / "runs"))
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    base = ["--config", str(cfg_path), "-q"]
    for args in (["gen-data"], ["train", "all"], ["sample"], ["sample", "--alpha", "0.5", "--style-seed", "3"],
                 ["sample", "--multi", "h0@0.3,0.5,0.3;h1@0.72,0.5,0.3"], ["eval"]):
        assert cli_main(base + args) == 0, args
    return cfg.run_dir()


def _strip_timing(report_csv: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(report_csv)))
    col = rows[0].index("infer_s")
    return [r[:col] + r[col + 1:] for r in rows]


def _artifacts(run: Path) -> dict[str, bytes]:
    keep = {}
    for p in sorted(run.rglob("*")):
        rel = p.relative_to(run).as_posix()
        if p.is_file() and rel != "logs/timing.json" and not rel.endswith("report.csv") \
                and not rel.endswith("report.txt"):
            keep[rel] = p.read_bytes()
    return keep


def test_criterion_9_reproducibility(criterion, tmp_path):
    with criterion(9, "two full pipeline runs give byte-identical checkpoints, images, eval CSVs") as c:
        runs = [_pipeline(tmp_path / name) for name in ("a", "b")]
        a, b = (_artifacts(r) for r in runs)
        differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
        n_ckpt = sum(k.endswith(".idg") for k in a)
        n_img = sum(k.endswith((".ppm", ".pgm")) for k in a)
        n_csv = sum(k.endswith(".csv") for k in a)
        reports = [next(r.rglob("eval/*/report.csv")).read_text() for r in runs]
        c.note(f"{len(a)} files compared ({n_ckpt} checkpoints, {n_img} images, {n_csv} csv)")
        c.note("report.csv compared without its wall-clock column")
        assert runs[0].name == runs[1].name
        assert not differing, f"differ: {differing[:5]}"
        assert n_ckpt == 4 and n_img > 0 and n_csv > 0
        assert _strip_timing(reports[0]) == _strip_timing(reports[1])
