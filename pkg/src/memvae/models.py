"""Generative models: the stochastic-addressing memory VAE and two baselines.

All forward passes are batched: targets ``X`` are ``[B, D_x]`` and ``K``
posterior samples are drawn per target, so per-sample quantities are
``[B, K]`` tensors (row ``b * K + k`` in flattened form).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .distributions import (BernoulliDist, CategoricalDist, DiagGaussianDist, kl_categorical,
                            kl_diag_gaussian)
from .memory import (EmbeddingNets, MemoryBuffer, address_posterior, address_prior, embed_memory,
                     read, similarity_matrix)
from .nn import MLP, Module
from .tensor import Tensor


@dataclass
class ModelSpec:
    dim_x: int
    z_dim: int = 8
    enc_hidden: Sequence[int] = (64, 32)
    dec_hidden: Sequence[int] = (32, 64)
    prior_hidden: Sequence[int] = (32,)
    emb_hidden: Sequence[int] = (128,)
    dim_e: int = 32
    similarity: str = "normalized_inner"
    prior_mode: str = "learned"


def _split_gaussian(h: Tensor, z_dim: int) -> DiagGaussianDist:
    return DiagGaussianDist(h[:, :z_dim], h[:, z_dim:])


def _standard_normal(n: int, z_dim: int) -> DiagGaussianDist:
    return DiagGaussianDist(np.zeros((n, z_dim)), np.zeros((n, z_dim)))


@dataclass
class JointSample:
    """``K`` draws ``(a, z)`` per target together with every log factor of
    the importance weight; all log terms are ``[B, K]``."""
    a: np.ndarray
    z: Tensor | None
    log_q_a: Tensor
    log_q_z: Tensor
    log_p_a: Tensor
    log_p_z: Tensor
    log_p_x: Tensor
    q_a: CategoricalDist
    p_a: CategoricalDist
    q_z: DiagGaussianDist | None = None
    p_z: DiagGaussianDist | None = None

    @property
    def log_w(self) -> Tensor:
        return self.log_p_a + self.log_p_z + self.log_p_x - self.log_q_a - self.log_q_z


class MemVAEModel(Module):
    """p(a) p(z|m_a) p(x|z, m_a) with posterior q(a|x) q(z|m_a, x)."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, memory: MemoryBuffer | None = None):
        self.spec = spec
        d, zd = spec.dim_x, spec.z_dim
        self.nets = EmbeddingNets(d, spec.dim_e, spec.emb_hidden, rng)
        if zd > 0:
            self.prior_net_z = MLP(d, spec.prior_hidden, 2 * zd, rng, final_scale=0.1)
            self.posterior_net_z = MLP(2 * d, spec.enc_hidden, 2 * zd, rng, final_scale=0.1)
            self.decoder = MLP(zd + d, spec.dec_hidden, d, rng)
        else:
            self.decoder = MLP(d, spec.dec_hidden, d, rng)
        self.mem = memory

    def set_memory(self, entries, labels=None, source_index=None) -> None:
        if self.mem is None or not self.mem.trainable:
            self.mem = MemoryBuffer(entries, labels=labels, source_index=source_index)
        else:
            raise RuntimeError("model owns a trainable memory")

    def address_dists(self, X) -> tuple[Tensor, CategoricalDist, CategoricalDist]:
        if self.mem is None:
            raise RuntimeError("memory is not populated")
        emb = embed_memory(self.nets, self.mem)
        prior = address_prior(self.nets, emb, self.spec.prior_mode, self.spec.similarity)
        post = address_posterior(self.nets, emb, X, self.spec.similarity)
        return emb, prior, post

    def conditionals(self, Xr: np.ndarray, m: Tensor):
        """p(z|m) and q(z|m, x) for aligned rows of targets and memory reads."""
        zd = self.spec.z_dim
        p_z = _split_gaussian(self.prior_net_z(m), zd)
        q_z = _split_gaussian(self.posterior_net_z(T.concat([Tensor(Xr), m], axis=1)), zd)
        return p_z, q_z

    def decode(self, z: Tensor | None, m: Tensor) -> Tensor:
        inp = m if z is None else T.concat([z, m], axis=1)
        return self.decoder(inp)

    def sample_posterior(self, X, K: int, rng: np.random.Generator | None,
                         addresses: np.ndarray | None = None, eps: np.ndarray | None = None) -> JointSample:
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        B = X.shape[0]
        _, prior, post = self.address_dists(X)
        a = post.sample(rng, K) if addresses is None else np.asarray(addresses, dtype=np.int64).reshape(B, K)
        log_q_a = post.log_prob(a)
        log_p_a = prior.log_prob(a)
        m = read(self.mem, a.reshape(-1))
        Xr = np.repeat(X, K, axis=0)
        zero = Tensor(np.zeros((B, K)))
        if self.spec.z_dim > 0:
            p_z, q_z = self.conditionals(Xr, m)
            z = q_z.sample(rng, None if eps is None else np.asarray(eps).reshape(B * K, -1))
            log_q_z = q_z.log_prob(z).reshape(B, K)
            log_p_z = p_z.log_prob(z).reshape(B, K)
        else:
            p_z = q_z = z = None
            log_q_z = log_p_z = zero
        log_p_x = BernoulliDist(self.decode(z, m)).log_prob(Xr).reshape(B, K)
        return JointSample(a, z, log_q_a, log_q_z, log_p_a, log_p_z, log_p_x, post, prior, q_z, p_z)


def joint_sample(model: MemVAEModel, x, rng: np.random.Generator) -> JointSample:
    """One ``(a, z)`` draw for a single target ``x`` (``[D_x]``)."""
    return model.sample_posterior(np.asarray(x, dtype=np.float64).reshape(1, -1), 1, rng)


@dataclass
class ElboTerms:
    recon: Tensor
    kl_a: Tensor
    kl_z: Tensor
    elbo: Tensor


def elbo_terms(model: MemVAEModel, X, sample: JointSample) -> ElboTerms:
    """Reconstruction and the two KL terms at the sampled addresses, ``[B, K]``.

    The ELBO is assembled from the entropy of q(a|x) and its cross-entropy
    against p(a) rather than from ``kl_a`` itself, so the decomposition
    identity ``elbo == recon - kl_a - kl_z`` is a real check.
    """
    B, K = sample.a.shape
    kl_a = kl_categorical(sample.q_a, sample.p_a).reshape(B, 1) * np.ones((1, K))
    if sample.q_z is not None:
        kl_z = kl_diag_gaussian(sample.q_z, sample.p_z).reshape(B, K)
    else:
        kl_z = Tensor(np.zeros((B, K)))
    q = T.exp(sample.q_a.log_probs)
    entropy = -(q * sample.q_a.log_probs).sum(axis=-1)
    cross = (q * sample.p_a.log_probs.reshape(1, -1)).sum(axis=-1)
    elbo = sample.log_p_x + (entropy + cross).reshape(B, 1) - kl_z
    return ElboTerms(sample.log_p_x, kl_a, kl_z, elbo)


def marginal_log_likelihood_exact(model: MemVAEModel, X, z_draws: int,
                                  rng: np.random.Generator | None = None) -> np.ndarray:
    """log p(x) by enumerating every address, importance-sampling z per address.

    Exact when ``z_dim == 0``. Returns one value per row of ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B, n_mem = X.shape[0], len(model.mem)
    draws = z_draws if model.spec.z_dim > 0 else 1
    per_addr = np.empty((B, n_mem))
    with T.no_grad():
        for a in range(n_mem):
            s = model.sample_posterior(X, draws, rng, addresses=np.full((B, draws), a))
            rest = (s.log_p_z + s.log_p_x - s.log_q_z).data
            per_addr[:, a] = s.log_p_a.data[:, 0] + _logmeanexp(rest, axis=1)
    return _logsumexp(per_addr, axis=1)


def generate(model: MemVAEModel, rng: np.random.Generator, n: int, address: int | None = None,
             z_mode: str = "sample", probs: bool = False) -> np.ndarray:
    """Ancestral samples ``[n, D_x]``: a ~ p(a) (or fixed), z ~ p(z|m_a), x ~ p(x|z, m_a).

    ``z_mode="mean"`` uses the prior mean; ``probs=True`` returns Bernoulli
    means instead of binary draws.
    """
    d = model.spec.dim_x
    if n == 0:
        return np.zeros((0, d))
    with T.no_grad():
        emb = embed_memory(model.nets, model.mem)
        prior = address_prior(model.nets, emb, model.spec.prior_mode, model.spec.similarity)
        a = prior.sample(rng, n) if address is None else np.full(n, address, dtype=np.int64)
        m = read(model.mem, a)
        z = None
        if model.spec.z_dim > 0:
            p_z = _split_gaussian(model.prior_net_z(m), model.spec.z_dim)
            z = p_z.mean if z_mode == "mean" else p_z.sample(rng)
        dist = BernoulliDist(model.decode(z, m))
        return dist.probs if probs else dist.sample(rng)


class BaselineVAE(Module):
    """Unconditioned VAE: N(0, I) prior, q(z|x), p(x|z)."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.encoder = MLP(spec.dim_x, spec.enc_hidden, 2 * spec.z_dim, rng, final_scale=0.1)
        self.decoder = MLP(spec.z_dim, spec.dec_hidden, spec.dim_x, rng)
        self.mem = None

    def forward(self, X, K: int, rng, eps=None) -> dict:
        X = np.asarray(X, dtype=np.float64)
        B, zd = X.shape[0], self.spec.z_dim
        q_z = _split_gaussian(self.encoder(Tensor(np.repeat(X, K, axis=0))), zd)
        z = q_z.sample(rng, None if eps is None else np.asarray(eps).reshape(B * K, zd))
        p_z = _standard_normal(B * K, zd)
        log_p_x = BernoulliDist(self.decoder(z)).log_prob(np.repeat(X, K, axis=0)).reshape(B, K)
        log_w = p_z.log_prob(z).reshape(B, K) + log_p_x - q_z.log_prob(z).reshape(B, K)
        return {"log_w": log_w, "recon": log_p_x, "kl_z": kl_diag_gaussian(q_z, p_z).reshape(B, K)}


class SoftAttentionModel(Module):
    """p(z) p(x|z, m(z)) with q(z|x); the memory readout
    m(z) = sum_a softmax(S(h_mem(m_a), g(z)))_a m_a depends on z only."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        d, zd = spec.dim_x, spec.z_dim
        self.encoder = MLP(d, spec.enc_hidden, 2 * zd, rng, final_scale=0.1)
        self.h_mem = MLP(d, spec.emb_hidden, spec.dim_e, rng)
        self.attn_query = MLP(zd, spec.emb_hidden, spec.dim_e, rng)
        self.decoder = MLP(zd + d, spec.dec_hidden, d, rng)
        self.mem: MemoryBuffer | None = None

    def set_memory(self, entries, labels=None, source_index=None) -> None:
        self.mem = MemoryBuffer(entries, labels=labels, source_index=source_index)

    def attention(self, z: Tensor) -> Tensor:
        """``[N, |M|]`` attention weights for ``N`` latent rows."""
        emb = self.h_mem(self.mem.entries)
        logits = similarity_matrix(emb, self.attn_query(z), self.spec.similarity)
        return T.exp(T.log_softmax(logits, axis=-1))

    def readout(self, z: Tensor) -> Tensor:
        return self.attention(z) @ self.mem.entries

    def forward(self, X, K: int, rng, eps=None) -> dict:
        X = np.asarray(X, dtype=np.float64)
        B, zd = X.shape[0], self.spec.z_dim
        Xr = np.repeat(X, K, axis=0)
        q_z = _split_gaussian(self.encoder(Tensor(Xr)), zd)
        z = q_z.sample(rng, None if eps is None else np.asarray(eps).reshape(B * K, zd))
        p_z = _standard_normal(B * K, zd)
        logits = self.decoder(T.concat([z, self.readout(z)], axis=1))
        log_p_x = BernoulliDist(logits).log_prob(Xr).reshape(B, K)
        log_w = p_z.log_prob(z).reshape(B, K) + log_p_x - q_z.log_prob(z).reshape(B, K)
        return {"log_w": log_w, "recon": log_p_x, "kl_z": kl_diag_gaussian(q_z, p_z).reshape(B, K)}


def soft_forward(model: SoftAttentionModel, X, rng, K: int = 1):
    """(elbo, recon, kl_z) per target, single-sample by default."""
    out = model.forward(X, K, rng)
    recon = out["recon"].mean(axis=1)
    kl_z = out["kl_z"].mean(axis=1)
    return recon - kl_z, recon, kl_z


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m, axis=axis)


def _logmeanexp(x: np.ndarray, axis: int) -> np.ndarray:
    return _logsumexp(x, axis) - math.log(x.shape[axis])
