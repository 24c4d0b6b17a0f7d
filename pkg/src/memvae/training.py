"""Run configuration, Adam, and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import time
import typing
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, load_class_directory, load_idx_dataset, sample_episode, split_classes, synth_pattern_corpus
from .distributions import make_rng
from .estimators import step_gradients
from .memory import MemoryBuffer
from .models import BaselineVAE, MemVAEModel, ModelSpec, SoftAttentionModel

log = logging.getLogger(__name__)

MODES = ("learned_memory", "few_shot", "recall")
MODELS = ("memvae", "vae", "soft")
METRICS_HEADER = ("step", "nll_bound", "kl_a", "kl_z", "recon", "wall_ms")
MEMORY_PARAM = "mem.entries"


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "memvae"
    mode: str = "few_shot"
    lr: float = 3e-4
    K: int = 4
    batch: int = 32
    memory_size: int = 16
    weight_decay: float = 0.0
    steps: int = 1000
    seed: int = 0
    prior_mode: str = "learned"
    similarity: str = "normalized_inner"
    # architecture
    z_dim: int = 8
    enc_hidden: tuple = (64, 32)
    dec_hidden: tuple = (32, 64)
    prior_hidden: tuple = (32,)
    emb_hidden: tuple = (128,)
    dim_e: int = 32
    # episodes
    n_classes: int = 8
    targets_per_class: int = 4
    mem_per_class: int = 4
    # bookkeeping
    log_interval: int = 100
    eval_k: int = 100
    clip_norm: float = 0.0
    wall_clock: bool = False
    # data
    dataset: str = "synthetic"
    data_path: str = ""
    labels_path: str = ""
    test_data_path: str = ""
    test_labels_path: str = ""
    pool: int = 4
    synth_classes: int = 200
    synth_per_class: int = 10
    synth_dim: int = 64
    synth_flip: float = 0.05
    synth_seed: int = 1234
    test_classes: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.prior_mode not in ("learned", "flat"):
            raise ConfigError(f"prior_mode must be learned or flat, got {self.prior_mode!r}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")

    def spec(self, dim_x: int) -> ModelSpec:
        return ModelSpec(dim_x=dim_x, z_dim=self.z_dim, enc_hidden=self.enc_hidden,
                         dec_hidden=self.dec_hidden, prior_hidden=self.prior_hidden,
                         emb_hidden=self.emb_hidden, dim_e=self.dim_e,
                         similarity=self.similarity, prior_mode=self.prior_mode)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: _coerce(k, v, hints[k]) for k, v in values.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path) as f:
            return cls.from_text(f.read(), **overrides)


def _coerce(key: str, value, hint):
    if not isinstance(value, str):
        return tuple(value) if hint is tuple else value
    try:
        if hint is bool:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if hint is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        return hint(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {hint.__name__}") from None


@dataclass
class MetricsRow:
    step: int
    nll_bound: float
    kl_a: float
    kl_z: float
    recon: float
    wall_ms: float

    def as_csv(self) -> list[str]:
        return [str(self.step)] + [repr(float(v)) for v in
                                   (self.nll_bound, self.kl_a, self.kl_z, self.recon, self.wall_ms)]


def write_metrics(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), *map(float, r[1:])) for r in reader]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0, exclude=frozenset()) -> AdamState:
    """One bias-corrected Adam step on descent gradients, with decoupled
    weight decay skipped for the parameter names in ``exclude``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        elif state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {state.m[name].shape}, parameter {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and name not in exclude:
            update = update + lr * weight_decay * p.data
        p.data = p.data - update
    return state


# ---------------------------------------------------------------------------
# building blocks

def load_dataset(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """(train, test) according to the data keys of the config."""
    if cfg.dataset == "synthetic":
        rng = make_rng(cfg.synth_seed)
        full = synth_pattern_corpus(cfg.synth_classes, cfg.synth_per_class, cfg.synth_dim, rng, cfg.synth_flip)
        return split_classes(full, cfg.test_classes, rng)
    if cfg.dataset == "idx":
        train = load_idx_dataset(cfg.data_path, cfg.labels_path or None, "train")
        if cfg.test_data_path:
            test = load_idx_dataset(cfg.test_data_path, cfg.test_labels_path or None, "test")
            return train, test
        return split_classes(train, cfg.test_classes, make_rng(cfg.synth_seed))
    if cfg.dataset == "classdir":
        full = load_class_directory(cfg.data_path, pool=cfg.pool)
        return split_classes(full, cfg.test_classes, make_rng(cfg.synth_seed))
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def build_model(cfg: TrainConfig, dim_x: int, rng: np.random.Generator):
    spec = cfg.spec(dim_x)
    if cfg.model == "vae":
        return BaselineVAE(spec, rng)
    if cfg.model == "soft":
        return SoftAttentionModel(spec, rng)
    memory = MemoryBuffer.random(cfg.memory_size, dim_x, rng) if cfg.mode == "learned_memory" else None
    return MemVAEModel(spec, rng, memory)


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, data, sampling) generators derived from one seed."""
    return tuple(np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(3))


def next_batch(cfg: TrainConfig, ds: Dataset, model, rng: np.random.Generator, class_index=None) -> np.ndarray:
    """Targets for one step; refreshes the memory where the mode requires it."""
    if cfg.mode == "recall":
        idx = rng.choice(len(ds), cfg.memory_size, replace=False)
        if model.mem is None or not model.mem.trainable:
            model.set_memory(ds.images[idx], None if ds.class_ids is None else ds.class_ids[idx], idx)
        return ds.images[idx][rng.integers(0, cfg.memory_size, cfg.batch)]
    if cfg.mode == "few_shot" and cfg.model != "vae":
        ep = sample_episode(ds, cfg.n_classes, cfg.targets_per_class, cfg.mem_per_class, rng, class_index)
        model.set_memory(ep.memory_images, ep.memory_labels, ep.memory_index)
        return ep.targets
    return ds.images[rng.choice(len(ds), cfg.batch, replace=False)]


@dataclass
class TrainResult:
    model: object
    metrics: list
    state: AdamState


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, model=None) -> TrainResult:
    """Optimize the bound for ``cfg.steps`` steps.

    Writes ``config.txt``, ``metrics.csv`` and ``checkpoint.bin`` into
    ``out_dir`` when given. Raises :class:`NumericalError` on a non-finite
    bound, after dumping the offending minibatch.
    """
    init_rng, data_rng, sample_rng = rng_streams(cfg.seed)
    if model is None:
        model = build_model(cfg, dataset.dim, init_rng)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write(cfg.to_text())
    class_index = dataset.class_index() if dataset.class_ids is not None else None
    state = AdamState()
    rows: list[MetricsRow] = []
    acc = np.zeros(4)
    acc_n = 0
    t_last = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        X = next_batch(cfg, dataset, model, data_rng, class_index)
        grads, res = step_gradients(model, X, cfg.K, sample_rng)
        if not np.all(np.isfinite(res.bound)) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            msg = f"non-finite bound or gradient at step {step} (minibatch id {step})"
            if out_dir is not None:
                dump = os.path.join(out_dir, f"nan_dump_step{step}.npz")
                np.savez(dump, targets=X, bound=res.bound,
                         memory=model.mem.entries.data if model.mem is not None else np.zeros(0))
                msg += f"; minibatch dumped to {dump}"
            raise NumericalError(msg)
        descent = {k: -g for k, g in grads.items()}
        if cfg.clip_norm > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in descent.values()))
            if norm > cfg.clip_norm:
                descent = {k: g * (cfg.clip_norm / norm) for k, g in descent.items()}
        adam_step(model.named_parameters(), descent, state, cfg.lr,
                  weight_decay=cfg.weight_decay, exclude={MEMORY_PARAM})
        d = res.diagnostics
        acc += [-res.bound.mean(), d["kl_a"].mean(), d["kl_z"].mean(), d["recon"].mean()]
        acc_n += 1
        if step % cfg.log_interval == 0 or step == cfg.steps:
            now = time.perf_counter()
            wall = (now - t_last) * 1000.0 if cfg.wall_clock else 0.0
            t_last = now
            rows.append(MetricsRow(step, *(acc / acc_n), wall))
            r = rows[-1]
            log.info("step %d nll %.3f kl_a %.3f kl_z %.3f", step, r.nll_bound, r.kl_a, r.kl_z)
            acc[:] = 0
            acc_n = 0
    if out_dir is not None:
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        T.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), model.named_parameters())
    return TrainResult(model, rows, state)


def metrics_text(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()
