"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (also
collected into the terminal summary) and then asserts the criterion.
"""
import math
import time

import numpy as np
import pytest

from memvae import tensor as T
from memvae.data import IdxParseError, parse_idx
from memvae.distributions import make_rng
from memvae.estimators import (enumerate_bound_gradient, iwae_gradients, multi_sample_bound,
                               step_gradients)
from memvae.evaluation import eval_recall, fewshot_benchmark, gradcheck, memory_sweep
from memvae.memory import MemoryBuffer
from memvae.models import MemVAEModel, elbo_terms
from memvae.training import TrainConfig, load_dataset, train

from conftest import ACCEPTANCE_LINES, binary, small_spec
from idx_fuzz import mutated_corpus

ARCH = dict(z_dim=4, enc_hidden=(64,), dec_hidden=(128,), emb_hidden=(128,), dim_e=32, lr=3e-4)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


@pytest.fixture(scope="session")
def recall_run():
    cfg = TrainConfig(mode="recall", memory_size=16, prior_mode="flat", steps=20000, log_interval=1000, **ARCH)
    train_ds, test_ds = load_dataset(cfg)
    t0 = time.perf_counter()
    res = train(cfg, train_ds)
    return res.model, train_ds, test_ds, time.perf_counter() - t0


@pytest.fixture(scope="session")
def few_shot_runs():
    base = dict(mode="few_shot", steps=6000, log_interval=1000, n_classes=8, targets_per_class=4,
                mem_per_class=4, **ARCH)
    models = {}
    for kind in ("memvae", "soft"):
        cfg = TrainConfig(model=kind, **base)
        train_ds, test_ds = load_dataset(cfg)
        models[kind] = train(cfg, train_ds).model
    return models, test_ds


def test_c01_gradcheck():
    t0 = time.perf_counter()
    rep = gradcheck(tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    name, worst = rep.worst
    small = all(n <= 1000 for n in rep.n_params.values())
    ok = rep.passed and elapsed < 120 and small
    report(1, ok, f"worst rel err {worst:.2e} ({name}) <= 1e-4; params {rep.n_params}; {elapsed:.1f}s < 120s")
    assert ok


def test_c02_vimco_matches_enumeration():
    rng = make_rng(11)
    spec = small_spec(dim_x=6, z_dim=0, emb_hidden=(), dim_e=3, dec_hidden=())
    model = MemVAEModel(spec, rng, MemoryBuffer(binary(rng, (3, 6))))
    x = binary(rng, (1, 6))
    K, batches, copies = 2, 200, 1000
    exact, _ = enumerate_bound_gradient(model, x, K)
    phi = [k for k in exact if k.startswith(("nets.h_mem", "nets.h_query"))]
    X = np.repeat(x, copies, axis=0)
    draw_rng = make_rng(12)
    t0 = time.perf_counter()
    means = {k: np.empty((batches,) + exact[k].shape) for k in phi}
    for b in range(batches):
        grads, _ = step_gradients(model, X, K, draw_rng)
        for k in phi:
            means[k][b] = grads[k]
    elapsed = time.perf_counter() - t0
    worst, n_coords = 0.0, 0
    for k in phi:
        est = means[k].mean(axis=0)
        se = means[k].std(axis=0, ddof=1) / math.sqrt(batches)
        z = np.abs(est - exact[k]) / np.maximum(se, 1e-300)
        worst = max(worst, float(z.max()))
        n_coords += z.size
    ok = worst <= 3.0 and elapsed < 300
    report(2, ok, f"max |mean - exact| / SE = {worst:.2f} <= 3 over {n_coords} phi coords, "
                  f"{batches * copies} draws; {elapsed:.1f}s < 300s")
    assert ok


def test_c03_single_slot_reduces_to_iwae():
    worst = 0.0
    for seed in range(5):
        rng = make_rng(seed)
        model = MemVAEModel(small_spec(), rng, MemoryBuffer(binary(rng, (1, 16))))
        X = binary(rng, (4, 16))
        g_vimco, _ = step_gradients(model, X, 5, make_rng(100 + seed))
        g_iwae = iwae_gradients(model, X, 5, make_rng(100 + seed))
        for k in g_vimco:
            worst = max(worst, float(np.abs(g_vimco[k] - g_iwae[k]).max()))
    ok = worst <= 1e-10
    report(3, ok, f"max |step_gradients - iwae| = {worst:.2e} <= 1e-10")
    assert ok


def test_c04_recall_convergence(recall_run):
    model, train_ds, _, elapsed = recall_run
    rep = eval_recall(model, train_ds, 16, K=100, episodes=10, rng=make_rng(5))
    log16 = math.log(16)
    ok = (log16 - 0.05 <= rep.nll <= log16 + 0.30 and rep.kl_a >= 0.9 * log16 and rep.kl_z <= 0.2
          and elapsed < 900)
    report(4, ok, f"nll {rep.nll:.3f} in [{log16 - 0.05:.3f}, {log16 + 0.30:.3f}], kl_a {rep.kl_a:.3f} >= "
                  f"{0.9 * log16:.3f}, kl_z {rep.kl_z:.3f} <= 0.2; train {elapsed:.0f}s < 900s")
    assert ok


def test_c05_test_memory_growth(recall_run):
    model, _, test_ds, _ = recall_run
    rep = eval_recall(model, test_ds, 64, K=100, episodes=10, rng=make_rng(6))
    gap = abs(rep.nll - math.log(64))
    ok = gap <= 0.5
    report(5, ok, f"|nll - log 64| = |{rep.nll:.3f} - {math.log(64):.3f}| = {gap:.3f} <= 0.5")
    assert ok


def test_c06_scaling_law(few_shot_runs):
    models, test_ds = few_shot_runs
    Cs = [1, 2, 4, 8, 16]
    diffs = {}
    for kind, model in models.items():
        sweep = memory_sweep(model, test_ds, Cs, [4], 100, make_rng(7), targets_per_class=2, episodes=4)
        base = sweep.row(1, 4).nll
        diffs[kind] = {C: sweep.row(C, 4).nll - base for C in Cs}
    hard, soft = diffs["memvae"], diffs["soft"]
    law = all(hard[C] <= math.log(C) + 0.5 for C in Cs)
    margin = soft[16] - hard[16]
    ok = law and margin >= 1.0
    report(6, ok, "hard nll(C)-nll(1) " + ", ".join(f"C={C}: {hard[C]:.2f}<={math.log(C) + 0.5:.2f}"
                                                    for C in Cs[1:])
           + f"; soft-hard at C=16 {margin:.2f} >= 1")
    assert ok


def test_c07_kl_decomposition():
    rng = make_rng(21)
    worst = 0.0
    for case in range(1000):
        z_dim = int(rng.integers(0, 4))
        n_mem = int(rng.integers(1, 7))
        prior_mode = ("learned", "flat")[case % 2]
        model = MemVAEModel(small_spec(dim_x=8, z_dim=z_dim, prior_mode=prior_mode), rng,
                            MemoryBuffer(binary(rng, (n_mem, 8))))
        X = binary(rng, (int(rng.integers(1, 4)), 8))
        with T.no_grad():
            s = model.sample_posterior(X, 1, rng)
            t = elbo_terms(model, X, s)
        worst = max(worst, float(np.abs(t.elbo.data - (t.recon - t.kl_a - t.kl_z).data).max()))
    ok = worst <= 1e-12
    report(7, ok, f"max |elbo - (recon - kl_a - kl_z)| = {worst:.2e} <= 1e-12 over 1000 cases")
    assert ok


def test_c08_bound_monotone_in_k():
    rng = make_rng(31)
    model = MemVAEModel(small_spec(), rng, MemoryBuffer(binary(rng, (5, 16))))
    x = binary(rng, (1, 16))
    reps = 10_000
    X = np.repeat(x, reps, axis=0)
    stats = {}
    with T.no_grad():
        for K in (1, 2, 4, 8):
            b = multi_sample_bound(model, X, K, make_rng(40 + K)).bound
            stats[K] = (b.mean(), b.std(ddof=1) / math.sqrt(reps))
    ok = True
    parts = []
    for lo, hi in ((1, 2), (2, 4), (4, 8)):
        diff = stats[hi][0] - stats[lo][0]
        sigma = math.hypot(stats[hi][1], stats[lo][1])
        ok &= diff >= -3 * sigma
        parts.append(f"L{hi}-L{lo}={diff:.4f} (3sigma {3 * sigma:.4f})")
    report(8, ok, "; ".join(parts))
    assert ok


def test_c09_fewshot_classification(few_shot_runs):
    models, test_ds = few_shot_runs
    res = fewshot_benchmark(models["memvae"], test_ds, way=5, shot=1, episodes=200, rng=make_rng(3),
                            rule="feedforward", K=16)
    ok = res.accuracy >= 0.8
    report(9, ok, f"5-way 1-shot feedforward accuracy {res.accuracy:.3f} >= 0.8 over 200 episodes")
    assert ok


def test_c10_determinism_and_idx_fuzz(tmp_path):
    cfg = TrainConfig(mode="few_shot", steps=50, log_interval=10, z_dim=2, enc_hidden=(16,), dec_hidden=(16,),
                      emb_hidden=(16,), dim_e=8, seed=4)
    train_ds, _ = load_dataset(cfg)
    train(cfg, train_ds, out_dir=tmp_path / "a")
    train(cfg, train_ds, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    corpus = mutated_corpus()
    rejected = 0
    for _, buf in corpus:
        try:
            parse_idx(buf)
        except IdxParseError:
            rejected += 1
    ok = a == b and len(a) > 0 and len(corpus) >= 50 and rejected == len(corpus)
    report(10, ok, f"metrics identical: {a == b} ({len(a)} bytes); idx fuzz {rejected}/{len(corpus)} rejected")
    assert ok
