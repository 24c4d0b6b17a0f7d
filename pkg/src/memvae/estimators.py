"""Multi-sample bound, VIMCO learning signals and gradient assembly."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import JointSample, MemVAEModel, _logsumexp, elbo_terms
from .tensor import Tensor

MAX_ENUMERATION = 10_000


@dataclass
class PosteriorSampleSet:
    """Per-target importance weights of ``K`` posterior samples (``[B, K]``)."""
    samples: JointSample | None
    log_w: np.ndarray
    norm_w: np.ndarray
    learning_signal: np.ndarray | None
    bound: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.log_w.shape[-1]


def normalized_weights(log_w: np.ndarray) -> np.ndarray:
    m = log_w.max(axis=-1, keepdims=True)
    e = np.exp(log_w - m)
    return e / e.sum(axis=-1, keepdims=True)


def bound_from_log_weights(log_w: np.ndarray) -> np.ndarray:
    return _logsumexp(log_w, axis=-1) - math.log(log_w.shape[-1])


def leave_one_out_logmeanexp(log_w: np.ndarray) -> np.ndarray:
    """``log 1/(K-1) sum_{k' != k} w_k'`` for every ``k``.

    Each entry is excluded and the rest max-shifted, so no exponentials are
    subtracted from one another.
    """
    K = log_w.shape[-1]
    out = np.empty_like(log_w)
    for k in range(K):
        rest = np.delete(log_w, k, axis=-1)
        out[..., k] = _logsumexp(rest, axis=-1)
    return out - math.log(K - 1)


def vimco_learning_signal(log_w) -> np.ndarray:
    """Per-sample signal: log-mean weight, minus the leave-one-out log-mean,
    minus the normalized weight. Accepts log-weights or a sample set."""
    if isinstance(log_w, PosteriorSampleSet):
        log_w = log_w.log_w
    log_w = np.asarray(log_w, dtype=np.float64)
    K = log_w.shape[-1]
    if K < 2:
        raise ValueError(f"the leave-one-out signal needs K >= 2, got K={K}")
    total = bound_from_log_weights(log_w)[..., None]
    return total - leave_one_out_logmeanexp(log_w) - normalized_weights(log_w)


def _draw(model, X, K: int, rng, **kw):
    """(sample-or-None, log_w tensor, per-target diagnostics) for any model."""
    if isinstance(model, MemVAEModel):
        s = model.sample_posterior(X, K, rng, **kw)
        with T.no_grad():
            terms = elbo_terms(model, X, s)
        diag = {"recon": terms.recon.data.mean(axis=1), "kl_a": terms.kl_a.data[:, 0],
                "kl_z": terms.kl_z.data.mean(axis=1)}
        return s, s.log_w, diag
    out = model.forward(X, K, rng, **kw)
    diag = {"recon": out["recon"].data.mean(axis=1), "kl_a": np.zeros(len(X)),
            "kl_z": out["kl_z"].data.mean(axis=1)}
    return None, out["log_w"], diag


def multi_sample_bound(model, X, K: int, rng: np.random.Generator) -> PosteriorSampleSet:
    if K < 1:
        raise ValueError("K must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s, log_w, diag = _draw(model, X, K, rng)
    lw = log_w.data
    signal = vimco_learning_signal(lw) if K >= 2 else None
    return PosteriorSampleSet(s, lw, normalized_weights(lw), signal, bound_from_log_weights(lw), diag)


def vimco_surrogate(s: JointSample, row_weight=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Surrogate whose gradient is the VIMCO estimate, summed over targets.

    ``sum_k w_k (log p(x, a_k, z_k) - log q(z_k|a_k, x)) + signal_k log q(a_k|x)``
    with ``w`` and ``signal`` held constant; the z path stays reparameterized.
    """
    lw = s.log_w.data
    w = normalized_weights(lw)
    signal = vimco_learning_signal(lw)
    if row_weight is not None:
        w = w * row_weight[:, None]
        signal = signal * row_weight[:, None]
    generative = s.log_p_a + s.log_p_z + s.log_p_x - s.log_q_z
    surrogate = (Tensor(w) * generative).sum() + (Tensor(signal) * s.log_q_a).sum()
    return surrogate, lw, signal


def _collect(model) -> dict[str, np.ndarray]:
    return {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
            for name, p in model.named_parameters().items()}


def step_gradients(model, X, K: int, rng: np.random.Generator):
    """Ascent gradients of the batch-mean bound, plus the drawn sample set.

    The memory model uses the VIMCO surrogate; the baselines have no
    discrete latent and use the plain multi-sample (IWAE) gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    model.zero_grad()
    if isinstance(model, MemVAEModel) and K < 2:
        raise ValueError("VIMCO needs K >= 2")
    with T.Tape():
        s, log_w, diag = _draw(model, X, K, rng)
        if s is not None:
            surrogate, lw, signal = vimco_surrogate(s)
        else:
            lw, signal = log_w.data, None
            surrogate = (T.logsumexp(log_w, axis=1) - math.log(K)).sum()
        T.backward(surrogate * (1.0 / B))
    grads = _collect(model)
    model.zero_grad()
    result = PosteriorSampleSet(s, lw, normalized_weights(lw), signal, bound_from_log_weights(lw), diag)
    return grads, result


def iwae_gradients(model, X, K: int, rng: np.random.Generator, **kw) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean bound obtained by differentiating
    ``logsumexp(log_w)`` directly (reference path for the reduction test)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    model.zero_grad()
    with T.Tape():
        _, log_w, _ = _draw(model, X, K, rng, **kw)
        bound = (T.logsumexp(log_w, axis=1) - math.log(K)).sum()
        T.backward(bound * (1.0 / X.shape[0]))
    grads = _collect(model)
    model.zero_grad()
    return grads


def _address_tuples(n_mem: int, K: int) -> np.ndarray:
    if n_mem ** K > MAX_ENUMERATION:
        raise ValueError(f"|M|^K = {n_mem}^{K} exceeds the enumeration limit {MAX_ENUMERATION}")
    return np.array(list(itertools.product(range(n_mem), repeat=K)), dtype=np.int64)


def enumerate_bound_gradient(model: MemVAEModel, x, K: int) -> tuple[dict[str, np.ndarray], float]:
    """Exact ``E[L]`` over all K-tuples of addresses and its gradient.

    Only for ``z_dim == 0`` models, where a tuple of addresses fixes every
    importance weight.
    """
    if model.spec.z_dim != 0:
        raise ValueError("enumeration requires z_dim == 0")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    n_mem = len(model.mem)
    tuples = _address_tuples(n_mem, K)
    model.zero_grad()
    with T.Tape():
        s = model.sample_posterior(x, n_mem, None, addresses=np.arange(n_mem)[None, :])
        log_w = s.log_w.reshape(-1)
        log_q = s.log_q_a.reshape(-1)
        tuple_log_w = log_w[tuples]
        tuple_log_prob = log_q[tuples].sum(axis=1)
        L = T.logsumexp(tuple_log_w, axis=1) - math.log(K)
        expected = (T.exp(tuple_log_prob) * L).sum()
        T.backward(expected)
    grads = _collect(model)
    model.zero_grad()
    return grads, expected.item()


def expected_vimco_gradient(model: MemVAEModel, x, K: int) -> dict[str, np.ndarray]:
    """Exact expectation of the VIMCO estimate over all address tuples
    (``z_dim == 0``); equals the enumerated gradient iff the estimator is
    unbiased."""
    if model.spec.z_dim != 0:
        raise ValueError("enumeration requires z_dim == 0")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    tuples = _address_tuples(len(model.mem), K)
    model.zero_grad()
    with T.Tape():
        X = np.repeat(x, len(tuples), axis=0)
        s = model.sample_posterior(X, K, None, addresses=tuples)
        prob = np.exp(s.log_q_a.data.sum(axis=1))
        surrogate, _, _ = vimco_surrogate(s, row_weight=prob)
        T.backward(surrogate)
    grads = _collect(model)
    model.zero_grad()
    return grads


def exact_log_marginal(model: MemVAEModel, x) -> float:
    """log p(x) for a ``z_dim == 0`` model by summing over addresses."""
    from .models import marginal_log_likelihood_exact
    return float(marginal_log_likelihood_exact(model, x, 1)[0])
