"""Evaluation: high-K bounds, memory-size sweeps, posterior dumps,
few-shot classification and finite-difference gradient checks."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, test_memory_sweep
from .distributions import make_rng
from .estimators import (enumerate_bound_gradient, expected_vimco_gradient, multi_sample_bound)
from .memory import MemoryBuffer
from .models import BaselineVAE, MemVAEModel, ModelSpec, SoftAttentionModel, elbo_terms
from .pgm import image_grid, write_pgm

SWEEP_HEADER = ("C", "N", "nll", "stderr", "kl_a", "kl_z", "ref_logC")
HISTOGRAM_HEADER = ("slot", "prob", "class_id")
MAX_ROWS_PER_PASS = 20_000


@dataclass
class EvalReport:
    nll: float
    stderr: float
    kl_a: float
    kl_z: float
    K: int
    n: int
    per_example: np.ndarray = field(repr=False, default=None)
    per_class: dict = field(default_factory=dict)
    memory_spec: tuple | None = None


def _set_memory(model, memory: MemoryBuffer | None) -> None:
    if memory is None or isinstance(model, BaselineVAE):
        return
    if isinstance(model, MemVAEModel) and model.mem is not None and model.mem.trainable:
        raise ValueError("model has a learned memory; an external memory cannot be swapped in")
    model.mem = memory


def per_example_bounds(model, X, K: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Bound, kl_a and kl_z for every row of ``X``, chunked to bound memory use."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    chunk = max(1, MAX_ROWS_PER_PASS // K)
    parts = {"bound": [], "kl_a": [], "kl_z": []}
    with T.no_grad():
        for start in range(0, len(X), chunk):
            res = multi_sample_bound(model, X[start:start + chunk], K, rng)
            parts["bound"].append(res.bound)
            parts["kl_a"].append(res.diagnostics["kl_a"])
            parts["kl_z"].append(res.diagnostics["kl_z"])
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in parts.items()}


def eval_nll(model, X, K: int = 100, rng: np.random.Generator | None = None, memory: MemoryBuffer | None = None,
             labels=None, seed: int = 0) -> EvalReport:
    """Mean negative multi-sample bound (nats per example) with its standard error."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = rng if rng is not None else make_rng(seed)
    _set_memory(model, memory)
    out = per_example_bounds(model, X, K, rng)
    nll = -out["bound"]
    n = len(nll)
    per_class = {}
    if labels is not None:
        labels = np.asarray(labels)
        per_class = {int(c): float(nll[labels == c].mean()) for c in np.unique(labels)}
    spec = None
    mem = getattr(model, "mem", None)
    if mem is not None and mem.labels is not None:
        counts = np.unique(mem.labels, return_counts=True)[1]
        spec = (len(counts), int(counts.min()))
    return EvalReport(float(nll.mean()), float(nll.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                      float(out["kl_a"].mean()), float(out["kl_z"].mean()), K, n, nll, per_class, spec)


def eval_recall(model, ds: Dataset, memory_size: int, K: int, episodes: int, rng: np.random.Generator) -> EvalReport:
    """Bound on targets that are themselves the memory rows (x in M)."""
    nll, kl_a, kl_z = [], [], []
    for _ in range(episodes):
        idx = rng.choice(len(ds), memory_size, replace=False)
        rep = eval_nll(model, ds.images[idx], K, rng, memory=MemoryBuffer(ds.images[idx], source_index=idx))
        nll.append(rep.per_example)
        kl_a.append(rep.kl_a)
        kl_z.append(rep.kl_z)
    allv = np.concatenate(nll)
    return EvalReport(float(allv.mean()), float(allv.std(ddof=1) / math.sqrt(len(allv))),
                      float(np.mean(kl_a)), float(np.mean(kl_z)), K, len(allv), allv)


# ---------------------------------------------------------------------------
# memory-size sweep

@dataclass
class SweepRow:
    C: int
    N: int
    nll: float
    stderr: float
    kl_a: float
    kl_z: float
    ref_logC: float


@dataclass
class SweepResult:
    rows: list
    audit: list = field(default_factory=list)  # (memory source indices, target indices) per evaluated memory

    def row(self, C: int, N: int) -> SweepRow:
        return next(r for r in self.rows if r.C == C and r.N == N)


def memory_sweep(model, ds: Dataset, C_list, N_list, K: int, rng: np.random.Generator,
                 targets_per_class: int = 2, episodes: int = 4) -> SweepResult:
    """NLL as the memory holds more classes (C) or more examples per class (N).

    Every episode draws ``max(C_list)`` classes and fixed targets per class.
    For a given C the classes are split into groups of C and each target is
    scored against its own group's memory, so all rows share one target set.
    ``ref_logC`` is the C = 1 result plus log C, the value expected of a
    model that identifies the class perfectly.
    """
    C_list = sorted(set(int(c) for c in C_list))
    C_max = max(C_list)
    eval_seed = int(rng.integers(2**31))
    per = {}  # (C, N) -> list of arrays
    audit = []
    for _ in range(episodes):
        classes = rng.choice(ds.classes(), C_max, replace=False)
        index = ds.class_index()
        targets = {int(c): rng.choice(index[int(c)], targets_per_class, replace=False) for c in classes}
        all_targets = np.concatenate(list(targets.values()))
        for N in N_list:
            mems = {int(c): test_memory_sweep(ds, [c], N, rng, exclude=all_targets) for c in classes}
            for C in sorted(set(C_list) | {1}):
                ev_rng = make_rng(eval_seed)
                for g in range(C_max // C):
                    group = [int(c) for c in classes[g * C:(g + 1) * C]]
                    mem = MemoryBuffer(np.concatenate([mems[c].entries.data for c in group]),
                                       labels=np.concatenate([mems[c].labels for c in group]),
                                       source_index=np.concatenate([mems[c].source_index for c in group]))
                    t_idx = np.concatenate([targets[c] for c in group])
                    audit.append((mem.source_index.copy(), t_idx))
                    _set_memory(model, mem)
                    out = per_example_bounds(model, ds.images[t_idx], K, ev_rng)
                    per.setdefault((C, N), []).append(np.stack([-out["bound"], out["kl_a"], out["kl_z"]]))
    rows = []
    for N in N_list:
        base = np.concatenate(per[(1, N)], axis=1)[0].mean()
        for C in C_list:
            vals = np.concatenate(per[(C, N)], axis=1)
            n = vals.shape[1]
            rows.append(SweepRow(C, N, float(vals[0].mean()), float(vals[0].std(ddof=1) / math.sqrt(n)),
                                 float(vals[1].mean()), float(vals[2].mean()), float(base + math.log(C))))
    return SweepResult(rows, audit)


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.C, r.N] + [repr(float(v)) for v in (r.nll, r.stderr, r.kl_a, r.kl_z, r.ref_logC)])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        if tuple(next(reader)) != SWEEP_HEADER:
            raise ValueError("unexpected sweep header")
        return [SweepRow(int(r[0]), int(r[1]), *map(float, r[2:])) for r in reader]


# ---------------------------------------------------------------------------
# posterior inspection

def inspect_posterior(model: MemVAEModel, x, memory: MemoryBuffer | None = None, top_n: int = 5,
                      out_dir=None, prefix: str = "posterior", image_shape=None) -> dict:
    """q(a|x) for one target; optionally writes ``<prefix>.csv`` and a PGM
    strip holding the target followed by the ``top_n`` most probable rows."""
    _set_memory(model, memory)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    with T.no_grad():
        _, _, post = model.address_dists(x)
    probs = post.probs[0]
    top = np.argsort(-probs, kind="stable")[:top_n]
    labels = model.mem.labels
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{prefix}.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(HISTOGRAM_HEADER)
            for slot, p in enumerate(probs):
                w.writerow([slot, repr(float(p)), "" if labels is None else int(labels[slot])])
        shape = image_shape or _square(x.shape[1])
        strip = np.concatenate([x, model.mem.entries.data[top]])
        write_pgm(os.path.join(out_dir, f"{prefix}.pgm"), image_grid(strip, shape, len(strip)))
    return {"probs": probs, "top": top, "labels": labels}


def _square(d: int) -> tuple[int, int]:
    side = int(round(math.sqrt(d)))
    return (side, side) if side * side == d else (1, d)


# ---------------------------------------------------------------------------
# few-shot classification

@dataclass
class ClassificationResult:
    way: int
    shot: int
    accuracy: float
    rule: str
    predictions: np.ndarray = field(repr=False, default=None)


def label_scores(model: MemVAEModel, queries, rule: str = "feedforward", K: int = 16,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized per-label scores ``[Q, n_labels]`` and the label ids."""
    labels = model.mem.labels
    if labels is None:
        raise ValueError("few-shot classification needs a labeled memory")
    classes = np.unique(labels)
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)  # [|M|, n_labels]
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    with T.no_grad():
        if rule == "feedforward":
            _, _, post = model.address_dists(queries)
            return post.probs @ onehot, classes
        if rule == "weighted":
            res = multi_sample_bound(model, queries, K, rng)
            return np.einsum("qk,qkc->qc", res.norm_w, onehot[res.samples.a]), classes
    raise ValueError(f"unknown rule {rule!r}")


def fewshot_classify(model: MemVAEModel, memory: MemoryBuffer, queries, query_labels, rule: str = "feedforward",
                     K: int = 16, rng: np.random.Generator | None = None) -> ClassificationResult:
    """Argmax label per query; ties go to the lowest label id."""
    if memory.labels is None:
        raise ValueError("few-shot classification needs a labeled memory")
    _set_memory(model, memory)
    scores, classes = label_scores(model, queries, rule, K, rng)
    pred = classes[np.argmax(scores, axis=1)]  # argmax returns the first maximum
    counts = np.unique(memory.labels, return_counts=True)[1]
    acc = float(np.mean(pred == np.asarray(query_labels)))
    return ClassificationResult(len(classes), int(counts.min()), acc, rule, pred)


def fewshot_benchmark(model: MemVAEModel, ds: Dataset, way: int, shot: int, episodes: int,
                      rng: np.random.Generator, queries_per_class: int = 1, rule: str = "feedforward",
                      K: int = 16) -> ClassificationResult:
    """Mean accuracy over random ``way``-way ``shot``-shot episodes."""
    index = ds.class_index()
    correct = total = 0
    for _ in range(episodes):
        classes = rng.choice(ds.classes(), way, replace=False)
        q_idx = np.concatenate([rng.choice(index[int(c)], queries_per_class, replace=False) for c in classes])
        mem = test_memory_sweep(ds, classes, shot, rng, exclude=q_idx)
        res = fewshot_classify(model, mem, ds.images[q_idx], ds.class_ids[q_idx], rule, K, rng)
        correct += res.accuracy * len(q_idx)
        total += len(q_idx)
    return ClassificationResult(way, shot, correct / total, rule)


# ---------------------------------------------------------------------------
# gradient checks

@dataclass
class GradcheckReport:
    errors: dict  # "<model>/<param>" -> max relative error
    tolerance: float
    n_params: dict

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{k}: max_rel_err={v:.3e} {'ok' if v <= self.tolerance else 'FAIL'}"
               for k, v in self.errors.items()]
        name, err = self.worst
        out.append(f"worst: {name} ({err:.3e}); tolerance {self.tolerance:g}; "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / den


def finite_difference(f, params: dict, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. every parameter entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        out[name] = g
    return out


def tiny_spec(z_dim: int = 2, dim_x: int = 8) -> ModelSpec:
    return ModelSpec(dim_x=dim_x, z_dim=z_dim, enc_hidden=(8,), dec_hidden=(8,), prior_hidden=(4,),
                     emb_hidden=(6,), dim_e=4)


def _objective(model, X, K, addresses, eps):
    """Bound plus the analytic ELBO terms, with all noise held fixed."""
    if isinstance(model, MemVAEModel):
        s = model.sample_posterior(X, K, None, addresses=addresses, eps=eps)
        terms = elbo_terms(model, X, s)
        bound = T.logsumexp(s.log_w, axis=1).sum()
        return bound + (terms.recon - terms.kl_a - terms.kl_z).sum()
    out = model.forward(X, K, None, eps=eps)
    return T.logsumexp(out["log_w"], axis=1).sum() + (out["recon"] - out["kl_z"]).sum()


def gradcheck_model(model, X, K: int, rng: np.random.Generator, step: float = 1e-5) -> dict[str, float]:
    B = len(X)
    zd = model.spec.z_dim
    eps = rng.standard_normal((B * K, zd)) if zd else None
    addresses = rng.integers(0, len(model.mem), (B, K)) if isinstance(model, MemVAEModel) else None
    params = model.named_parameters()
    model.zero_grad()
    with T.Tape():
        T.backward(_objective(model, X, K, addresses, eps))
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    model.zero_grad()

    def f():
        with T.no_grad():
            return _objective(model, X, K, addresses, eps).item()

    numeric = finite_difference(f, params, step)
    return {k: float(relative_error(analytic[k], numeric[k]).max()) for k in params}


def gradcheck(tolerance: float = 1e-4, seed: int = 0, kinds=("memvae", "vae", "soft"),
              discrete: bool = True) -> GradcheckReport:
    """Finite-difference check of every differentiable path of the three
    models, plus an exact check of the discrete (VIMCO) path against the
    enumerated gradient of the expected bound."""
    rng = make_rng(seed)
    errors, sizes = {}, {}
    dim_x, K = 8, 2
    X = (rng.random((3, dim_x)) < 0.5).astype(np.float64)
    mem = (rng.random((3, dim_x)) < 0.5).astype(np.float64)
    for kind in kinds:
        if kind == "memvae":
            model = MemVAEModel(tiny_spec(), rng, MemoryBuffer(mem, trainable=True))
        elif kind == "vae":
            model = BaselineVAE(tiny_spec(), rng)
        elif kind == "soft":
            model = SoftAttentionModel(tiny_spec(), rng)
            model.set_memory(mem)
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        sizes[kind] = model.num_parameters()
        for name, err in gradcheck_model(model, X, K, rng).items():
            errors[f"{kind}/{name}"] = err
    if discrete:
        toy = MemVAEModel(tiny_spec(z_dim=0), rng)
        toy.set_memory(mem)
        sizes["memvae_discrete"] = toy.num_parameters()
        exact, _ = enumerate_bound_gradient(toy, X[0], K)
        expected = expected_vimco_gradient(toy, X[0], K)
        for name in exact:
            errors[f"memvae_discrete/{name}"] = float(relative_error(expected[name], exact[name]).max())
    return GradcheckReport(errors, tolerance, sizes)
