"""Identity-similarity evaluation: ablation table, identity swap and img2img layout checks."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .avatargen import CROP, StyleSpec, crop_face, face_mask_for_style, random_style, render_avatar
from .encoders import IdentityEncoder
from .pipeline import Generator, masked_style_image

METHOD_IMAGE = "Ours w/ image"
METHOD_TEXT = "Ours w/ text"
METHOD_NO_ID = "Ours w/o ID input"
METHODS = (METHOD_TEXT, METHOD_IMAGE, METHOD_NO_ID)
REPORT_HEADER = ("method", "single_sim", "multi_sim", "tune_s", "infer_s")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def generated_face_crop(image: np.ndarray, style: StyleSpec) -> np.ndarray:
    """Face region of a generated image, located by the conditioning style geometry."""
    return crop_face(image, face_mask_for_style(style, image.shape[-1]), CROP)


def face_similarity(generated_image: np.ndarray, style_used: StyleSpec, reference_crops: Sequence[np.ndarray],
                    encoder: IdentityEncoder) -> float:
    """Mean cosine between the generated face embedding and each reference crop embedding."""
    if len(reference_crops) == 0:
        raise ValueError("face_similarity needs at least one reference crop")
    g = encoder.encode(generated_face_crop(generated_image, style_used))
    refs = encoder.encode(np.stack(reference_crops))
    return float(np.mean([cosine(g, r) for r in refs]))


@dataclass
class MethodRow:
    method: str
    single_image_sim: float
    multi_image_sim: float
    tuning_time_s: float
    inference_time_s: float

    def __post_init__(self):
        for v in (self.single_image_sim, self.multi_image_sim):
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{self.method}: similarity {v} outside [-1, 1]")
        if self.tuning_time_s < 0 or self.inference_time_s < 0:
            raise ValueError(f"{self.method}: negative time")


@dataclass
class SampleRecord:
    method: str
    identity: int
    seed: int
    single_sim: float
    multi_sim: float


@dataclass
class EvalReport:
    rows: list[MethodRow]
    sample_count: int
    seed: int
    records: list[SampleRecord] = field(default_factory=list)

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.method, f"{r.single_image_sim:.6f}", f"{r.multi_image_sim:.6f}",
                        f"{r.tuning_time_s:.3f}", f"{r.inference_time_s:.4f}"])
        return buf.getvalue()

    def records_csv(self) -> str:
        """Per-image similarities; unlike the timing column this is fully deterministic."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "identity", "seed", "single_sim", "multi_sim"))
        for r in self.records:
            w.writerow([r.method, r.identity, r.seed, f"{r.single_sim:.8f}", f"{r.multi_sim:.8f}"])
        return buf.getvalue()

    def table(self) -> str:
        head = ["Method", "Single-image sim", "Multi-image sim", "Tuning (s)", "Inference (s)"]
        body = [[r.method, f"{r.single_image_sim:.3f}", f"{r.multi_image_sim:.3f}",
                 f"{r.tuning_time_s:.1f}", f"{r.inference_time_s:.3f}"] for r in self.rows]
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
        lines.append(f"({self.sample_count} images per method, seed {self.seed})")
        return "\n".join(lines)


def parse_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != REPORT_HEADER:
        raise ValueError(f"unexpected report header {tuple(rows[0].keys())}")
    return rows


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("IDG_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map; each job seeds its own generator, so results do not
    depend on the number of workers."""
    n = max_workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class EvalCase:
    identity: int           # index into the held-out pool
    seed: int
    style: StyleSpec        # generation style
    ref_styles: tuple       # reference render styles; [0] is the single-shot input


def eval_cases(gen: Generator) -> list[EvalCase]:
    e = gen.cfg.eval
    cases = []
    for h in range(len(gen.heldout_ids)):
        for j in range(e.seeds_per_identity):
            rng = np.random.default_rng([e.seed, 100, h, j])
            style = random_style(rng)
            refs = tuple(random_style(rng) for _ in range(e.num_refs))
            cases.append(EvalCase(h, int(rng.integers(0, 2**31 - 1)), style, refs))
    return cases


def _method_guidance(gen: Generator, method: str, case: EvalCase, ref_crops: np.ndarray) -> np.ndarray:
    ident = gen.heldout_ids[case.identity]
    style_image = masked_style_image(render_avatar(ident, case.style))
    e_f = gen.face_embedding(ref_crops[0])
    if method == METHOD_IMAGE:
        return gen.bundle(e_f, style_image=style_image, alpha=1.0).e_g
    if method == METHOD_TEXT:
        return gen.bundle(e_f, tokens=case.style.style_tokens, alpha=0.0).e_g
    if method == METHOD_NO_ID:
        return gen.bundle(np.zeros_like(e_f), style_image=style_image, alpha=1.0).e_g
    raise ValueError(f"unknown method {method!r}")


def run_ablation(gen: Generator, methods: Sequence[str] = METHODS, on_image=None) -> EvalReport:
    """Generate one image per (held-out identity, seed, method) and score it against
    the reference renders. Every method sees the same cases and sampler seeds."""
    cases = eval_cases(gen)
    refs = {c: np.stack([render_avatar(gen.heldout_ids[c.identity], s).face_crop for s in c.ref_styles])
            for c in cases}

    def job(args):
        method, case = args
        g = _method_guidance(gen, method, case, refs[case])
        t0 = time.perf_counter()
        img = gen.sample(g, seed=case.seed)
        dt = time.perf_counter() - t0
        single = face_similarity(img, case.style, refs[case][:1], gen.identity)
        multi = face_similarity(img, case.style, refs[case], gen.identity)
        return SampleRecord(method, case.identity, case.seed, single, multi), dt, img

    jobs = [(m, c) for m in methods for c in cases]
    results = _parallel_map(job, jobs)
    rows, records = [], []
    for m in methods:
        mine = [(rec, dt) for (rec, dt, _), (mm, _) in zip(results, jobs) if mm == m]
        records.extend(rec for rec, _ in mine)
        rows.append(MethodRow(m, float(np.mean([r.single_sim for r, _ in mine])),
                              float(np.mean([r.multi_sim for r, _ in mine])),
                              0.0,  # feed-forward: no per-identity fitting
                              float(np.mean([dt for _, dt in mine]))))
    if on_image is not None:
        for (rec, _, img) in results:
            on_image(rec, img)
    return EvalReport(rows, len(cases), gen.cfg.eval.seed, records)


@dataclass
class SwapResult:
    trials: int
    wins: int
    margins: list[float]

    @property
    def rate(self) -> float:
        return self.wins / self.trials


def identity_swap(gen: Generator, trials: int | None = None, seed: int | None = None) -> SwapResult:
    """Keep the style image (masked render of identity A) and feed identity B's face.

    A trial succeeds when the generated face is closer to B than to A.
    """
    trials = gen.cfg.eval.swap_trials if trials is None else trials
    seed = gen.cfg.eval.seed if seed is None else seed
    ids = gen.heldout_ids

    def job(k):
        rng = np.random.default_rng([seed, 200, k])
        a, b = rng.choice(len(ids), size=2, replace=False)
        style, face_style = random_style(rng), random_style(rng)
        style_image = masked_style_image(render_avatar(ids[a], style))
        face_input = render_avatar(ids[b], face_style).face_crop
        g = gen.bundle(gen.face_embedding(face_input), style_image=style_image).e_g
        img = gen.sample(g, seed=int(rng.integers(0, 2**31 - 1)))
        e = gen.identity.encode(generated_face_crop(img, style))
        # both references share the generation style, so accessories and
        # background cannot favour either side
        ref_a, ref_b = (gen.identity.encode(render_avatar(ids[k], style).face_crop) for k in (a, b))
        return cosine(e, ref_b) - cosine(e, ref_a)

    margins = _parallel_map(job, range(trials))
    return SwapResult(trials, int(sum(m > 0 for m in margins)), margins)


@dataclass
class Img2ImgResult:
    low_strength: float
    high_strength: float
    mse_low: list[float]
    mse_high: list[float]

    @property
    def mean_low(self) -> float:
        return float(np.mean(self.mse_low))

    @property
    def mean_high(self) -> float:
        return float(np.mean(self.mse_high))


def img2img_layout(gen: Generator, seeds: int | None = None, low: float = 0.3, high: float = 1.0,
                   seed: int | None = None) -> Img2ImgResult:
    """Pixel MSE between img2img output and its input, at two strengths with paired seeds."""
    seeds = gen.cfg.eval.img2img_seeds if seeds is None else seeds
    seed = gen.cfg.eval.seed if seed is None else seed
    ids = gen.heldout_ids

    def job(k):
        rng = np.random.default_rng([seed, 300, k])
        ident = ids[int(rng.integers(0, len(ids)))]
        sample = render_avatar(ident, random_style(rng))
        g = gen.bundle(gen.face_embedding(sample.face_crop), style_image=masked_style_image(sample)).e_g
        s = int(rng.integers(0, 2**31 - 1))
        out = [gen.sample(g, seed=s, init_image=sample.image, strength=st) for st in (low, high)]
        return [float(((o.astype(np.float64) - sample.image) ** 2).mean()) for o in out]

    res = _parallel_map(job, range(seeds))
    return Img2ImgResult(low, high, [r[0] for r in res], [r[1] for r in res])
