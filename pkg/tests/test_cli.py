import numpy as np
import pytest

import memvae.training as training
from memvae import tensor as T
from memvae.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from memvae.evaluation import read_sweep_csv
from memvae.training import TrainConfig, read_metrics

CONFIG = """\
mode = few_shot
steps = 4
log_interval = 2
z_dim = 2
enc_hidden = 8
dec_hidden = 8
emb_hidden = 8
dim_e = 4
synth_classes = 30
synth_dim = 16
test_classes = 10
n_classes = 4
targets_per_class = 2
mem_per_class = 2
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(CONFIG)
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "train")]) == EXIT_OK
    return root


def ckpt(run):
    return str(run / "train" / "checkpoint.bin")


class TestCommands:
    def test_train_outputs(self, run):
        rows = read_metrics(run / "train" / "metrics.csv")
        assert [r.step for r in rows] == [2, 4]
        assert TrainConfig.load(run / "train" / "config.txt") == TrainConfig.load(run / "run.cfg")

    def test_eval(self, run, capsys):
        out = run / "eval"
        assert main(["eval", "--checkpoint", ckpt(run), "--out", str(out), "--k", "5", "--episodes", "2"]) == EXIT_OK
        report = dict(line.split(" = ") for line in (out / "eval.txt").read_text().splitlines())
        assert report["K"] == "5" and report["memory"] == "4x2"
        assert (out / "config.txt").exists() and (out / "per_class.csv").exists()
        assert "nll" in capsys.readouterr().out

    def test_eval_default_k(self, run):
        out = run / "eval100"
        assert main(["eval", "--checkpoint", ckpt(run), "--out", str(out), "--episodes", "1"]) == EXIT_OK
        assert "K = 100" in (out / "eval.txt").read_text()

    def test_eval_deterministic(self, run):
        for name in ("d1", "d2"):
            main(["eval", "--checkpoint", ckpt(run), "--out", str(run / name), "--k", "4", "--episodes", "1",
                  "--seed", "9"])
        assert (run / "d1" / "eval.txt").read_text() == (run / "d2" / "eval.txt").read_text()

    def test_sweep(self, run):
        out = run / "sweep"
        assert main(["sweep", "--checkpoint", ckpt(run), "--out", str(out), "--k", "3", "--C", "1,2",
                     "--N", "1,2", "--episodes", "1"]) == EXIT_OK
        rows = read_sweep_csv(out / "sweep.csv")
        assert [(r.C, r.N) for r in rows] == [(1, 1), (2, 1), (1, 2), (2, 2)]

    def test_sample(self, run):
        out = run / "sample"
        assert main(["sample", "--checkpoint", ckpt(run), "--out", str(out), "--n", "6"]) == EXIT_OK
        assert (out / "samples.pgm").read_bytes()[:2] == b"P5"
        assert (out / "memory.pgm").exists()

    def test_inspect(self, run):
        out = run / "inspect"
        assert main(["inspect", "--checkpoint", ckpt(run), "--out", str(out), "--index", "3",
                     "--include-target"]) == EXIT_OK
        lines = (out / "posterior.csv").read_text().splitlines()
        assert lines[0] == "slot,prob,class_id" and len(lines) == 1 + 8
        probs = [float(l.split(",")[1]) for l in lines[1:]]
        assert sum(probs) == pytest.approx(1.0, abs=1e-12)

    def test_classify(self, run):
        out = run / "classify"
        assert main(["classify", "--checkpoint", ckpt(run), "--out", str(out), "--episodes", "5",
                     "--rule", "weighted", "--k", "4"]) == EXIT_OK
        assert "accuracy = " in (out / "classify.txt").read_text()

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out
        assert "worst:" in (tmp_path / "gradcheck.txt").read_text()

    @pytest.mark.parametrize("model", ["vae", "soft"])
    def test_baseline_checkpoints(self, run, model):
        out = run / f"train_{model}"
        assert main(["train", "--config", str(run / "run.cfg"), "--set", f"model={model}", "--out", str(out)]) == 0
        assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(run / f"e_{model}"),
                     "--k", "3", "--episodes", "1"]) == EXIT_OK
        assert main(["sample", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(run / f"s_{model}"),
                     "--n", "2"]) == EXIT_OK


class TestExitCodes:
    def test_usage_errors(self, run, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == EXIT_USAGE
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--k", "many"])
        assert exc.value.code == EXIT_USAGE

    def test_config_errors(self, run, tmp_path):
        assert main(["train", "--config", str(run / "run.cfg"), "--set", "lrate=1", "--out", str(tmp_path)]) == 1
        assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE
        assert main(["inspect", "--checkpoint", ckpt(run), "--index", "99999", "--out", str(tmp_path)]) == 1

    def test_numerical_failure(self, run, tmp_path, monkeypatch):
        real = training.step_gradients

        def poisoned(model, X, K, rng):
            grads, res = real(model, X, K, rng)
            res.bound[:] = np.inf
            return grads, res

        monkeypatch.setattr(training, "step_gradients", poisoned)
        assert main(["train", "--config", str(run / "run.cfg"), "--out", str(tmp_path)]) == EXIT_NUMERIC
        assert list(tmp_path.glob("nan_dump_step1.npz"))

    def test_gradcheck_failure(self, tmp_path, monkeypatch):
        fwd, bwd = T.UNARY["relu"]
        monkeypatch.setitem(T.UNARY, "relu", (fwd, lambda g, x, y: 0.5 * bwd(g, x, y)))
        assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_NUMERIC
        assert "FAIL" in (tmp_path / "gradcheck.txt").read_text()
