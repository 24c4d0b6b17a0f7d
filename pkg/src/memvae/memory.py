"""Memory buffer, embedding networks and content-based addressing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .distributions import CategoricalDist
from .nn import MLP, Module
from .tensor import Tensor

SIMILARITY_KINDS = ("normalized_inner", "inner", "cosine")
NORM_FLOOR = 1e-8


class MemoryBuffer(Module):
    """Rows ``m_a`` of the memory in raw input space.

    In trainable (learned-memory) mode the entries are a parameter; otherwise
    they are plain data refreshed between steps via :meth:`refresh`.
    """

    def __init__(self, entries, trainable: bool = False, labels=None, source_index=None):
        arr = np.array(entries.data if isinstance(entries, Tensor) else entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"memory needs shape [|M| >= 1, D_x], got {arr.shape}")
        self.entries = Tensor(arr, requires_grad=trainable)
        self.trainable = trainable
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.source_index = None if source_index is None else np.asarray(source_index, dtype=np.int64)
        if self.labels is not None and len(self.labels) != len(arr):
            raise ValueError("one label per memory row required")

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator, scale: float = 0.05):
        return cls(rng.normal(0.0, scale, size=(size, dim)), trainable=True)

    def __len__(self):
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def refresh(self, entries, labels=None, source_index=None) -> None:
        if self.trainable:
            raise RuntimeError("a trainable memory is updated by the optimizer, not refreshed")
        arr = np.array(entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"memory needs shape [|M| >= 1, D_x], got {arr.shape}")
        self.entries = Tensor(arr)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.source_index = None if source_index is None else np.asarray(source_index, dtype=np.int64)


def read(mem: MemoryBuffer, a) -> Tensor:
    """Row(s) ``m_a``; on a trainable memory the gradient lands in those rows only."""
    idx = np.asarray(a)
    if idx.size and (idx.min() < 0 or idx.max() >= len(mem)):
        raise IndexError(f"address out of range [0, {len(mem)}): {idx.min()}..{idx.max()}")
    return mem.entries[idx]


class EmbeddingNets(Module):
    """``h_mem`` embeds memory rows, ``h_query`` embeds targets, and
    ``e_prior`` is the learned query point of the address prior."""

    def __init__(self, dim_x: int, dim_e: int, hidden: Sequence[int], rng: np.random.Generator):
        self.h_mem = MLP(dim_x, hidden, dim_e, rng)
        self.h_query = MLP(dim_x, hidden, dim_e, rng)
        self.e_prior = Tensor(np.zeros(dim_e), requires_grad=True)
        self.dim_e = dim_e


def embed_memory(nets: EmbeddingNets, mem: MemoryBuffer) -> Tensor:
    """All memory embeddings at once, ``[|M|, |e|]``; reused for every query."""
    return nets.h_mem(mem.entries)


def _row_norm(e: Tensor) -> Tensor:
    # clamping the squared norm keeps sqrt differentiable at zero
    return T.sqrt(T.maximum((e * e).sum(axis=-1, keepdims=True), NORM_FLOOR ** 2))


def similarity(e_a, e_q, kind: str = "normalized_inner") -> Tensor:
    """Similarity of one memory embedding and one query embedding."""
    e_a, e_q = T.as_tensor(e_a), T.as_tensor(e_q)
    return similarity_matrix(e_a.reshape(1, -1), e_q.reshape(1, -1), kind).reshape(())


def similarity_matrix(mem_emb: Tensor, query_emb: Tensor, kind: str = "normalized_inner") -> Tensor:
    """``[B, |M|]`` similarities from one ``[B, |e|] x [|e|, |M|]`` product."""
    if kind not in SIMILARITY_KINDS:
        raise ValueError(f"unknown similarity {kind!r}; expected one of {SIMILARITY_KINDS}")
    keys = mem_emb
    if kind in ("normalized_inner", "cosine"):
        keys = mem_emb / _row_norm(mem_emb)
    query = query_emb
    if kind == "cosine":
        query = query_emb / _row_norm(query_emb)
    return query @ keys.T


@dataclass
class AddressDistPair:
    prior: CategoricalDist
    posterior: CategoricalDist


def address_posterior(nets: EmbeddingNets, mem_emb: Tensor, x, kind: str = "normalized_inner") -> CategoricalDist:
    """q(a|x) for a batch ``x`` of shape ``[B, D_x]`` (or one ``[D_x]`` row)."""
    x = T.as_tensor(x)
    single = x.ndim == 1
    q = nets.h_query(x.reshape(1, -1) if single else x)
    logits = similarity_matrix(mem_emb, q, kind)
    return CategoricalDist(logits.reshape(-1) if single else logits)


def address_prior(nets: EmbeddingNets, mem_emb: Tensor, mode: str = "learned",
                  kind: str = "normalized_inner") -> CategoricalDist:
    """p(a), unbatched over ``|M|`` slots."""
    if mode == "flat":
        return CategoricalDist(np.zeros(mem_emb.shape[0]))
    if mode != "learned":
        raise ValueError(f"unknown prior mode {mode!r}")
    logits = similarity_matrix(mem_emb, nets.e_prior.reshape(1, -1), kind)
    return CategoricalDist(logits.reshape(-1))
