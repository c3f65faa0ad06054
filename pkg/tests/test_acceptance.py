"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
quantity next to its tolerance, then asserts.
"""

import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from vera.evaluator import DegenerateLabels, average_precision, evaluate_arrays, roc_auc
from vera.manifest import DatasetManifest, VideoRecord, expand_labels
from vera.prompting import load_preset_questions
from vera.sampler import plan_segments
from vera.scorer import (
    ScoreConfig,
    ensemble_scores,
    gaussian_smooth,
    initial_scores,
    refine_scores,
    score_video,
    segment_embeddings,
    similarity_matrix,
)
from vera.simulation import SimChatBackend, SimEmbeddingBackend, SimWorld, make_synthetic_benchmark
from vera.trainer import TrainConfig, run_training

VOCAB = (("fire", 0.15), ("weapon", 0.12), ("crash", 0.08))
QSTAR = load_preset_questions("ucf_crime")


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return emit


def _random_unit(rng, h, dim):
    e = rng.standard_normal((h, dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def test_criterion_01_numeric_oracle(report):
    rng = np.random.default_rng(20240601)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        h = int(rng.integers(1, 51))
        d = int(rng.integers(1, 33))
        F = h * d + int(rng.integers(0, d))
        y = rng.integers(0, 2, h)
        e = _random_unit(rng, h, int(rng.integers(2, 17)))
        cfg = ScoreConfig(
            d=d,
            k_ratio=float(rng.uniform(0.01, 1.0)),
            tau=float(10 ** rng.uniform(-2, 1)),
            kernel_size=int(rng.choice([1, 3, 5, 15, 31])),
            sigma1=float(rng.uniform(0.5, 15)),
            sigma2_ratio=float(rng.uniform(0.05, 1.0)),
        )
        got, _, _ = refine_scores(y, e, d, F, cfg)
        ref = oracles.pipeline(y.tolist(), e.tolist(), d, F, cfg.k_ratio, cfg.tau, cfg.kernel_size, cfg.sigma1, cfg.sigma2_ratio)
        worst = max(worst, float(np.max(np.abs(got - np.array(ref)))))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 5.0, f"max |diff| {worst:.2e} (tol 1e-9) over 200 instances in {elapsed:.2f}s (limit 5s)")


def test_criterion_02_convexity(report):
    rng = np.random.default_rng(7)
    worst_sum, violations = 0.0, 0
    for _ in range(1000):
        h = int(rng.integers(1, 41))
        y = rng.integers(0, 2, h)
        e = _random_unit(rng, h, 8)
        cfg = ScoreConfig(k_ratio=float(rng.uniform(0.01, 1.0)), tau=float(10 ** rng.uniform(-3, 3)))
        out, neighbours, weights = ensemble_scores(y, e, cfg, return_details=True)
        for u in range(h):
            worst_sum = max(worst_sum, abs(float(weights[u].sum()) - 1.0))
            lo, hi = y[neighbours[u]].min(), y[neighbours[u]].max()
            violations += not (lo <= out[u] <= hi)
    report(2, worst_sum <= 1e-12 and violations == 0,
           f"max |sum(w)-1| {worst_sum:.1e} (tol 1e-12), {violations} range violations over 1000 cases")


def test_criterion_03_temperature_limits(report):
    rng = np.random.default_rng(3)
    exact, worst_mean = True, 0.0
    for _ in range(100):
        h = int(rng.integers(2, 41))
        y = rng.integers(0, 2, h)
        e = _random_unit(rng, h, 8)
        sim = similarity_matrix(e)
        off = sim[~np.eye(h, dtype=bool)]
        assert len(np.unique(np.round(off, 12))) == off.size // 2  # tie-free apart from symmetry
        k_ratio = float(rng.uniform(0.2, 1.0))
        cold = ensemble_scores(y, e, ScoreConfig(k_ratio=k_ratio, tau=1e-8))
        exact &= bool(np.array_equal(cold, y.astype(float)))
        hot, neighbours, _ = ensemble_scores(y, e, ScoreConfig(k_ratio=k_ratio, tau=1e8), return_details=True)
        means = np.array([y[k].mean() for k in neighbours])
        worst_mean = max(worst_mean, float(np.max(np.abs(hot - means))))
    report(3, exact and worst_mean <= 1e-6,
           f"tau=1e-8 reproduces initial exactly: {exact}; tau=1e8 max |diff to K-mean| {worst_mean:.1e} (tol 1e-6)")


def test_criterion_04_auc_ap_oracle(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 1001))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, int(rng.choice([3, 50, 10**6])), n).astype(float)
        worst = max(worst, abs(roc_auc(s, y) - oracles.pairwise_auc(s.tolist(), y.tolist())))
    hand = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ap_hand = (average_precision([0.9, 0.1], [1, 0]), average_precision([0.1, 0.9], [1, 0]))
    ok = worst <= 1e-12 and hand == 0.75 and ap_hand == (1.0, 0.5)
    report(4, ok, f"max |AUC - pairwise| {worst:.1e} (tol 1e-12); hand cases AUC {hand}, AP {ap_hand}")


def _training_run(seed, val_fraction):
    manifest, planted = make_synthetic_benchmark(n_videos=20, seed=seed)
    world = SimWorld(videos=planted, detector_accuracy=0.6, vocabulary=VOCAB, seed=seed)
    cfg = TrainConfig(max_iterations=100, validation_period=5, val_fraction=val_fraction, seed=seed)
    _, state = run_training(manifest, cfg, SimChatBackend(world))
    return state.history[0][1], state.best_acc


def test_criterion_05_training_monotone(report):
    t0 = time.perf_counter()
    runs = [_training_run(seed, 0.10) for seed in range(10)]
    elapsed = time.perf_counter() - t0
    ok = all(best >= initial for initial, best in runs)
    report(5, ok and elapsed < 30.0,
           f"Acc* >= Acc(Q0) on {sum(b >= i for i, b in runs)}/10 seeds in {elapsed:.2f}s (limit 30s)")


def test_criterion_06_training_improvement(report):
    # 6 validation videos; a 10% split leaves only 2 and quantizes accuracy to {0, .5, 1}
    gains = [best - initial for initial, best in (_training_run(seed, 0.30) for seed in range(10))]
    med = statistics.median(gains)
    report(6, med >= 0.15, f"median Acc* gain {med:.3f} over 10 seeds (need >= 0.15); gains {[round(g, 3) for g in gains]}")


def test_criterion_07_ablation_trend(report):
    cfg = ScoreConfig()
    aucs = []
    for seed in range(20):
        manifest, planted = make_synthetic_benchmark(n_videos=30, seed=1000 + seed, split="test")
        world = SimWorld(videos=planted, detector_accuracy=0.85, seed=seed)
        chat, emb = SimChatBackend(world, parallelism=1), SimEmbeddingBackend(world, parallelism=1)
        levels, labels = {1: [], 2: [], 3: []}, []
        for v in manifest.videos:
            plan = plan_segments(v, cfg.d, cfg.window_seconds, cfg.per_window)
            init, _, _ = initial_scores(v, QSTAR, cfg, chat, plan=plan, explain=False)
            e = segment_embeddings(v, plan, emb)
            levels[1].append(refine_scores(init, e, plan, v.frame_count, cfg, steps=())[0])
            levels[2].append(refine_scores(init, e, plan, v.frame_count, cfg, steps=("ensemble",))[0])
            levels[3].append(refine_scores(init, e, plan, v.frame_count, cfg)[0])
            labels.append(expand_labels(v).labels)
        y = np.concatenate(labels)
        aucs.append([roc_auc(np.concatenate(levels[k]), y) for k in (1, 2, 3)])
    m1, m2, m3 = np.mean(aucs, axis=0)
    report(7, m2 > m1 and m3 >= m2 - 0.01,
           f"mean AUC Step1 {m1:.4f}, Step1+2 {m2:.4f}, Step1+2+3 {m3:.4f} over 20 seeds")


def _transcript(tmp: Path, tag: str, max_iterations: int, resume: bool = False):
    manifest, planted = make_synthetic_benchmark(n_videos=20, seed=5)
    world = SimWorld(videos=planted, detector_accuracy=0.6, vocabulary=VOCAB, seed=5)
    cfg = TrainConfig(max_iterations=max_iterations, validation_period=5, val_fraction=0.3, seed=5)
    run_training(manifest, cfg, SimChatBackend(world), checkpoint_path=tmp / f"{tag}.ck", log_path=tmp / f"{tag}.log", resume=resume)
    return (tmp / f"{tag}.log").read_bytes(), (tmp / f"{tag}.ck").read_bytes()


def test_criterion_08_determinism_and_resume(report, tmp_path):
    a = _transcript(tmp_path, "a", 40)
    b = _transcript(tmp_path, "b", 40)
    _transcript(tmp_path, "r", 20)
    r = _transcript(tmp_path, "r", 40, resume=True)
    rec = VideoRecord("v", 300, 30, "", 1, [(100, 180)])
    world = SimWorld(videos={"v": ((100, 180),)}, detector_accuracy=0.85, seed=1)
    s1 = score_video(rec, QSTAR, ScoreConfig(), SimChatBackend(world), SimEmbeddingBackend(world))[0].scores
    s2 = score_video(rec, QSTAR, ScoreConfig(), SimChatBackend(world, parallelism=7), SimEmbeddingBackend(world))[0].scores
    repeat = a == b and s1.tobytes() == s2.tobytes()
    resumed = r == a
    report(8, repeat and resumed, f"repeat runs byte-identical: {repeat}; resumed transcript equals uninterrupted: {resumed}")


def test_criterion_09_full_scale_manual(report):
    readme = Path(__file__).resolve().parents[1] / "README.md"
    documented = "import-ucf" in readme.read_text() and "86.55" in readme.read_text()
    report(9, documented and QSTAR.m == 5,
           "MANUAL: full-scale AUC needs real datasets and a served VLM; procedure documented in README, not run here")


def test_criterion_10_degenerate_inputs(report):
    outcomes = {}
    cfg = ScoreConfig()
    world = SimWorld(videos={"short": ((2, 5),), "normal": ()}, detector_accuracy=1.0)
    chat, emb = SimChatBackend(world), SimEmbeddingBackend(world)

    short = VideoRecord("short", 10, 30, "", 1, [(2, 5)])  # F < d, one segment
    frames, seg = score_video(short, QSTAR, cfg, chat, emb)
    outcomes["F<d single segment"] = seg.plan.segment_count == 1 and np.isfinite(frames.scores).all() and len(frames) == 10

    one = ensemble_scores([1], [[0.3, 0.4]], cfg)
    outcomes["h=1 ensemble/smooth"] = one.tolist() == [1.0] and gaussian_smooth(one, cfg).tolist() == [1.0]

    normal = VideoRecord("normal", 400, 30, "", 0, [])
    frames, _ = score_video(normal, QSTAR, cfg, chat, emb)
    outcomes["all-normal video -> zeros"] = not frames.scores.any()

    outcomes["all-tied scores -> AUC 0.5, AP = prevalence"] = (
        roc_auc([0.3] * 8, [0, 1] * 4) == 0.5 and average_precision([0.3] * 8, [0, 1] * 4) == 0.5
    )

    def raises(fn):
        try:
            fn()
        except DegenerateLabels:
            return True
        return False

    outcomes["single-class labels -> DegenerateLabels"] = raises(lambda: roc_auc([0.1, 0.2], [0, 0])) and raises(
        lambda: average_precision([0.1, 0.2], [0, 0])
    )
    outcomes["all-normal manifest aggregate -> DegenerateLabels"] = raises(
        lambda: evaluate_arrays({"n": np.zeros(4)}, {"n": np.zeros(4, dtype=int)})
    )
    failed = [k for k, ok in outcomes.items() if not ok]
    report(10, not failed, f"{len(outcomes) - len(failed)}/{len(outcomes)} degenerate cases as specified" + (f"; failing: {failed}" if failed else ""))
