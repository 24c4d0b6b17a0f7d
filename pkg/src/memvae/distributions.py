"""Categorical, diagonal-Gaussian and Bernoulli distributions on tensors.

Leading axes are batch axes; log-densities reduce over the last axis only.
All samplers take an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams for identical seeds."""
    return np.random.Generator(np.random.Philox(seed))


class CategoricalDist:
    def __init__(self, logits):
        self.logits = T.as_tensor(logits)
        if self.logits.ndim == 0 or self.logits.shape[-1] == 0:
            raise ValueError("categorical needs at least one category")
        self.log_probs = T.log_softmax(self.logits, axis=-1)

    @property
    def size(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def log_prob(self, index) -> Tensor:
        return categorical_log_prob(self, index)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        return categorical_sample(self, rng, n)


def categorical_log_prob(d: CategoricalDist, index) -> Tensor:
    """``log_probs[index]``; for batched logits ``index`` has the batch shape
    as its leading axes (e.g. ``[B]`` or ``[B, K]``)."""
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"category index must be integer, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= d.size):
        raise IndexError(f"category index out of range [0, {d.size}): {idx.min()}..{idx.max()}")
    if d.logits.ndim == 1:
        return d.log_probs[idx]
    batch = d.logits.shape[:-1]
    if len(batch) != 1:
        raise ValueError("only one batch axis is supported")
    rows = np.arange(batch[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return d.log_probs[rows, idx]


def categorical_sample(d: CategoricalDist, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Inverse-CDF draws, one uniform per draw.

    Unbatched logits give a scalar (``n is None``) or ``n`` draws; batched
    logits ``[B, M]`` give ``[B]`` or ``[B, n]``.
    """
    probs = d.probs
    cdf = np.cumsum(probs, axis=-1)
    if probs.ndim == 1:
        u = rng.random(() if n is None else (n,))
        idx = np.searchsorted(cdf, u, side="right")
    else:
        u = rng.random((probs.shape[0],) if n is None else (probs.shape[0], n))
        u2 = u if n is not None else u[:, None]
        idx = (cdf[:, None, :] <= u2[..., None]).sum(axis=-1)
        if n is None:
            idx = idx[:, 0]
    return np.minimum(idx, d.size - 1).astype(np.int64)


class DiagGaussianDist:
    def __init__(self, mean, log_var):
        self.mean = T.as_tensor(mean)
        self.log_var = T.as_tensor(log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {self.mean.shape} vs log_var {self.log_var.shape}")

    def log_prob(self, z) -> Tensor:
        return gaussian_log_prob(self, z)

    def sample(self, rng: np.random.Generator, eps: np.ndarray | None = None) -> Tensor:
        return gaussian_reparam_sample(self, rng, eps)


def gaussian_log_prob(d: DiagGaussianDist, z) -> Tensor:
    z = T.as_tensor(z)
    if z.shape[-1:] != d.mean.shape[-1:]:
        raise ValueError(f"z {z.shape} does not match gaussian of shape {d.mean.shape}")
    sq = (z - d.mean) ** 2 / T.exp(d.log_var)
    return (-0.5 * (sq + d.log_var + LOG_2PI)).sum(axis=-1)


def gaussian_reparam_sample(d: DiagGaussianDist, rng: np.random.Generator | None,
                            eps: np.ndarray | None = None) -> Tensor:
    if eps is None:
        eps = rng.standard_normal(d.mean.shape)
    return d.mean + T.exp(0.5 * d.log_var) * eps


class BernoulliDist:
    def __init__(self, logits):
        self.logits = T.as_tensor(logits)

    @property
    def probs(self) -> np.ndarray:
        return T._sigmoid(self.logits.data)

    def log_prob(self, x) -> Tensor:
        return bernoulli_log_prob(self, x)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(self.logits.shape) < self.probs).astype(np.float64)


def bernoulli_log_prob(d: BernoulliDist, x) -> Tensor:
    """sum_i x_i l_i - softplus(l_i), i.e. the logits form of the likelihood."""
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all((xv == 0) | (xv == 1)):
        raise ValueError("bernoulli observations must be 0 or 1")
    return (d.logits * xv - T.softplus(d.logits)).sum(axis=-1)


def kl_categorical(q: CategoricalDist, p: CategoricalDist) -> Tensor:
    if q.size != p.size:
        raise ValueError(f"support mismatch: {q.size} vs {p.size}")
    return (T.exp(q.log_probs) * (q.log_probs - p.log_probs)).sum(axis=-1)


def kl_diag_gaussian(q: DiagGaussianDist, p: DiagGaussianDist) -> Tensor:
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    ratio = (T.exp(q.log_var) + (q.mean - p.mean) ** 2) / T.exp(p.log_var)
    return (0.5 * (p.log_var - q.log_var + ratio - 1.0)).sum(axis=-1)
