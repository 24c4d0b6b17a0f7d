"""Command-line entry point: ``python3 -m memvae <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(including a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .data import test_memory_sweep
from .distributions import make_rng
from .evaluation import (EvalReport, eval_nll, eval_recall, fewshot_benchmark, gradcheck, inspect_posterior,
                         memory_sweep, write_sweep_csv)
from .memory import MemoryBuffer
from .models import BaselineVAE, MemVAEModel, generate
from .pgm import image_grid, write_pgm
from .training import ConfigError, NumericalError, TrainConfig, build_model, load_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("memvae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memvae", description="Memory-addressed VAE: training and evaluation tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_ckpt=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", default=None, help="run directory")
        if needs_ckpt:
            sp.add_argument("--checkpoint", help="checkpoint.bin written by train")
            sp.add_argument("--k", type=int, default=100, help="importance samples for evaluation")
        return sp

    common(sub.add_parser("train", help="optimize the bound"), needs_ckpt=False)
    ev = common(sub.add_parser("eval", help="high-K NLL bound on held-out data"))
    ev.add_argument("--episodes", type=int, default=10)
    sw = common(sub.add_parser("sweep", help="NLL as the test memory grows"))
    sw.add_argument("--C", type=_int_list, default=[1, 2, 4, 8, 16], help="classes in memory")
    sw.add_argument("--N", type=_int_list, default=[4], help="examples per class")
    sw.add_argument("--episodes", type=int, default=4)
    sw.add_argument("--targets-per-class", type=int, default=2)
    sa = common(sub.add_parser("sample", help="ancestral samples as a PGM grid"))
    sa.add_argument("--n", type=int, default=32)
    sa.add_argument("--means", action="store_true", help="write Bernoulli means instead of binary draws")
    ins = common(sub.add_parser("inspect", help="dump q(a|x) for one test target"))
    ins.add_argument("--index", type=int, default=0, help="row of the test split")
    ins.add_argument("--top-n", type=int, default=5)
    ins.add_argument("--include-target", action="store_true", help="put the target itself into memory")
    cl = common(sub.add_parser("classify", help="few-shot classification accuracy"))
    cl.add_argument("--way", type=int, default=5)
    cl.add_argument("--shot", type=int, default=1)
    cl.add_argument("--episodes", type=int, default=100)
    cl.add_argument("--rule", choices=("feedforward", "weighted"), default="feedforward")
    gc = common(sub.add_parser("gradcheck", help="finite-difference gradient check"), needs_ckpt=False)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _config(args) -> TrainConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        echoed = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        path = echoed if os.path.exists(echoed) else None
    if path is None:
        return TrainConfig.from_dict(overrides)
    return TrainConfig.load(path, **overrides)


def _run_dir(args, cfg: TrainConfig) -> str:
    out = args.out or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as f:
        f.write(cfg.to_text())
    return out


def _load_model(args, cfg: TrainConfig, dim_x: int):
    model = build_model(cfg, dim_x, make_rng(cfg.seed))
    if args.checkpoint:
        model.load_state(T.load_checkpoint(args.checkpoint))
    else:
        log.warning("no --checkpoint given; evaluating a freshly initialized model")
    return model


def _needs_memory(model, cfg) -> bool:
    return not isinstance(model, BaselineVAE) and not (cfg.mode == "learned_memory" and cfg.model == "memvae")


def _write_report(path, fields: dict) -> None:
    with open(path, "w") as f:
        for k, v in fields.items():
            f.write(f"{k} = {v}\n")


def cmd_train(args, cfg):
    out = _run_dir(args, cfg)
    train_ds, _ = load_dataset(cfg)
    res = train(cfg, train_ds, out_dir=out)
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"step {last.step}: nll_bound {last.nll_bound:.4f} kl_a {last.kl_a:.4f} kl_z {last.kl_z:.4f}")
    print(f"wrote {out}")


def cmd_eval(args, cfg):
    out = _run_dir(args, cfg)
    _, test = load_dataset(cfg)
    model = _load_model(args, cfg, test.dim)
    rng = make_rng(cfg.seed)
    if cfg.mode == "recall" and _needs_memory(model, cfg):
        rep = eval_recall(model, test, cfg.memory_size, args.k, args.episodes, rng)
    elif _needs_memory(model, cfg):
        # each episode: n_classes held-out classes, mem_per_class rows each, disjoint targets
        per_ex, labels, kl_a, kl_z = [], [], [], []
        index = test.class_index()
        for _ in range(args.episodes):
            classes = rng.choice(test.classes(), cfg.n_classes, replace=False)
            t_idx = np.concatenate([rng.choice(index[int(c)], cfg.targets_per_class, replace=False)
                                    for c in classes])
            mem = test_memory_sweep(test, classes, cfg.mem_per_class, rng, exclude=t_idx)
            r = eval_nll(model, test.images[t_idx], args.k, rng, memory=mem)
            per_ex.append(r.per_example)
            labels.append(test.class_ids[t_idx])
            kl_a.append(r.kl_a)
            kl_z.append(r.kl_z)
        allv, labels = np.concatenate(per_ex), np.concatenate(labels)
        rep = EvalReport(
            float(allv.mean()), float(allv.std(ddof=1) / np.sqrt(len(allv))), float(np.mean(kl_a)),
            float(np.mean(kl_z)), args.k, len(allv), allv,
            {int(c): float(allv[labels == c].mean()) for c in np.unique(labels)},
            (cfg.n_classes, cfg.mem_per_class))
    else:
        rep = eval_nll(model, test.images, args.k, rng, labels=test.class_ids)
    _write_report(os.path.join(out, "eval.txt"), {
        "nll": repr(rep.nll), "stderr": repr(rep.stderr), "kl_a": repr(rep.kl_a), "kl_z": repr(rep.kl_z),
        "K": rep.K, "n": rep.n, "memory": "" if rep.memory_spec is None else "%dx%d" % rep.memory_spec})
    if rep.per_class:
        with open(os.path.join(out, "per_class.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("class_id", "nll"))
            for c, v in sorted(rep.per_class.items()):
                w.writerow((c, repr(v)))
    print(f"nll {rep.nll:.4f} +- {rep.stderr:.4f} (K={rep.K}, n={rep.n}) kl_a {rep.kl_a:.4f} kl_z {rep.kl_z:.4f}")


def cmd_sweep(args, cfg):
    out = _run_dir(args, cfg)
    _, test = load_dataset(cfg)
    model = _load_model(args, cfg, test.dim)
    res = memory_sweep(model, test, args.C, args.N, args.k, make_rng(cfg.seed),
                       targets_per_class=args.targets_per_class, episodes=args.episodes)
    write_sweep_csv(os.path.join(out, "sweep.csv"), res.rows)
    for r in res.rows:
        print(f"C={r.C:3d} N={r.N:3d} nll {r.nll:.4f} +- {r.stderr:.4f} ref {r.ref_logC:.4f}")


def _eval_memory(cfg, test, rng) -> MemoryBuffer:
    classes = rng.choice(test.classes(), min(cfg.n_classes, len(test.classes())), replace=False)
    return test_memory_sweep(test, classes, cfg.mem_per_class, rng)


def cmd_sample(args, cfg):
    out = _run_dir(args, cfg)
    _, test = load_dataset(cfg)
    model = _load_model(args, cfg, test.dim)
    rng = make_rng(cfg.seed)
    if isinstance(model, MemVAEModel):
        if _needs_memory(model, cfg):
            model.mem = _eval_memory(cfg, test, rng)
        x = generate(model, rng, args.n, probs=args.means)
        write_pgm(os.path.join(out, "memory.pgm"), image_grid(model.mem.entries.data, test.image_shape, 8))
    else:
        with T.no_grad():
            if isinstance(model, BaselineVAE):
                z = T.Tensor(rng.standard_normal((args.n, model.spec.z_dim)))
                logits = model.decoder(z)
            else:
                model.mem = _eval_memory(cfg, test, rng)
                z = T.Tensor(rng.standard_normal((args.n, model.spec.z_dim)))
                logits = model.decoder(T.concat([z, model.readout(z)], axis=1))
        p = 1.0 / (1.0 + np.exp(-logits.data))
        x = p if args.means else (rng.random(p.shape) < p).astype(np.float64)
    write_pgm(os.path.join(out, "samples.pgm"), image_grid(x, test.image_shape, 8))
    print(f"wrote {args.n} samples to {os.path.join(out, 'samples.pgm')}")


def cmd_inspect(args, cfg):
    out = _run_dir(args, cfg)
    _, test = load_dataset(cfg)
    model = _load_model(args, cfg, test.dim)
    if not isinstance(model, MemVAEModel):
        raise UsageError("inspect needs a memvae checkpoint")
    if not 0 <= args.index < len(test):
        raise UsageError(f"--index must be in [0, {len(test)})")
    rng = make_rng(cfg.seed)
    memory = None
    if _needs_memory(model, cfg):
        c = int(test.class_ids[args.index])
        others = rng.choice(test.classes()[test.classes() != c], cfg.n_classes - 1, replace=False)
        memory = test_memory_sweep(test, np.concatenate([[c], others]), cfg.mem_per_class, rng,
                                   exclude=[] if args.include_target else [args.index])
        if args.include_target and args.index not in memory.source_index:
            memory = MemoryBuffer(np.vstack([test.images[args.index], memory.entries.data[1:]]),
                                  labels=np.concatenate([[c], memory.labels[1:]]),
                                  source_index=np.concatenate([[args.index], memory.source_index[1:]]))
    res = inspect_posterior(model, test.images[args.index], memory, args.top_n, out, image_shape=test.image_shape)
    for slot in res["top"]:
        print(f"slot {slot}: q={res['probs'][slot]:.4f}")


def cmd_classify(args, cfg):
    out = _run_dir(args, cfg)
    _, test = load_dataset(cfg)
    model = _load_model(args, cfg, test.dim)
    if not isinstance(model, MemVAEModel):
        raise UsageError("classify needs a memvae checkpoint")
    res = fewshot_benchmark(model, test, args.way, args.shot, args.episodes, make_rng(cfg.seed),
                            rule=args.rule, K=args.k)
    _write_report(os.path.join(out, "classify.txt"),
                  {"way": res.way, "shot": res.shot, "rule": res.rule, "accuracy": repr(res.accuracy)})
    print(f"{res.way}-way {res.shot}-shot {res.rule}: accuracy {res.accuracy:.4f}")


def cmd_gradcheck(args, cfg):
    out = _run_dir(args, cfg)
    rep = gradcheck(args.tolerance, seed=cfg.seed)
    lines = rep.lines()
    with open(os.path.join(out, "gradcheck.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(lines[-1])
    return EXIT_OK if rep.passed else EXIT_NUMERIC


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "sample": cmd_sample,
            "inspect": cmd_inspect, "classify": cmd_classify, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        code = COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FileNotFoundError, KeyError) as e:
        print(f"memvae {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, T.DomainError, FloatingPointError) as e:
        print(f"memvae {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
