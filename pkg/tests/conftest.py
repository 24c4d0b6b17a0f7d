import numpy as np
import pytest

from memvae import tensor as T
from memvae.distributions import make_rng
from memvae.models import MemVAEModel, ModelSpec
from memvae.memory import MemoryBuffer


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(x)`` (``x`` is perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, n) -> float:
    a, n = np.asarray(a), np.asarray(n)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)).max())


def small_spec(dim_x=16, z_dim=3, **kw) -> ModelSpec:
    base = dict(dim_x=dim_x, z_dim=z_dim, enc_hidden=(16,), dec_hidden=(16,), prior_hidden=(8,),
                emb_hidden=(16,), dim_e=8)
    base.update(kw)
    return ModelSpec(**base)


def binary(rng, shape) -> np.ndarray:
    return (rng.random(shape) < 0.5).astype(np.float64)


@pytest.fixture
def rng():
    return make_rng(0)


@pytest.fixture
def small_model(rng):
    model = MemVAEModel(small_spec(), rng)
    model.mem = MemoryBuffer(binary(rng, (5, 16)), labels=np.array([0, 0, 1, 1, 2]))
    return model


@pytest.fixture(autouse=True)
def _clean_default_tape():
    yield
    T._DEFAULT_TAPE.clear()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
