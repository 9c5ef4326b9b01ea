"""Memory banks, similarity contexts, positive mining, and contrastive losses.

All losses are log-ratio forms computed as logsumexp(denominator logits)
minus logsumexp(numerator logits), which keeps them stable at small
temperatures and makes the algebraic reductions exact: an empty mined set
recovers the plain instance-discrimination loss bit-for-bit, and a full
mined set drives the loss to zero.

Gradients flow through the query embeddings only; augmented twins and bank
contents enter as constants. Guiding-view similarities in the directed
cross-view loss are constants by default and may be passed as tensors to
let gradients reach the guiding view.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_NORM_TOL = 1e-6


class MemoryBank:
    """Fixed-capacity FIFO queue of unit-norm embeddings.

    Slot indices are stable: enqueueing overwrites the oldest slot in
    place, so index i refers to the same original sample across banks that
    share an enqueue schedule.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"bank: bad capacity {capacity} or dim {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._storage = np.zeros((capacity, dim), dtype=np.float64)
        self._size = 0
        self._cursor = 0

    @classmethod
    def randomized(cls, capacity: int, dim: int, rng) -> "MemoryBank":
        """A full bank of seeded random unit vectors (training warm start)."""
        bank = cls(capacity, dim)
        vecs = rng.normal(size=(capacity, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        bank._storage[:] = vecs
        bank._size = capacity
        return bank

    def __len__(self):
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    @property
    def matrix(self) -> np.ndarray:
        """Stored embeddings in slot order, as a read-only view."""
        view = self._storage[: self._size]
        view.flags.writeable = False
        return view

    def contents(self) -> np.ndarray:
        """Stored embeddings oldest-first (queue order)."""
        if self._size < self.capacity:
            return self._storage[: self._size].copy()
        return np.roll(self._storage, -self._cursor, axis=0)

    def enqueue(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ValueError(f"bank: expected (n, {self.dim}) batch, got {batch.shape}")
        norms = np.linalg.norm(batch, axis=1)
        off = np.abs(norms - 1.0) > _NORM_TOL
        if off.any():
            bad = int(np.argmax(off))
            raise ValueError(f"bank: embedding {bad} has norm {norms[bad]:.8f}, "
                             "expected unit length")
        n = batch.shape[0]
        if n >= self.capacity:
            self._storage[:] = batch[-self.capacity:]
            self._size = self.capacity
            self._cursor = 0
            return
        positions = (self._cursor + np.arange(n)) % self.capacity
        self._storage[positions] = batch
        self._cursor = int((self._cursor + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)


def _bank_matrix(bank) -> np.ndarray:
    matrix = bank.matrix if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError(f"bank: empty or malformed bank with shape {matrix.shape}")
    return matrix


def compute_context(z, bank) -> np.ndarray:
    """Similarity vector of one embedding against every bank slot."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    matrix = _bank_matrix(bank)
    if z.ndim != 1 or z.shape[0] != matrix.shape[1]:
        raise ValueError(f"compute_context: embedding shape {z.shape} does not "
                         f"match bank dim {matrix.shape[1]}")
    if abs(np.linalg.norm(z) - 1.0) > _NORM_TOL:
        raise ValueError("compute_context: embedding is not unit-norm")
    return matrix @ z


def compute_context_batch(z, bank) -> np.ndarray:
    """(B, bank size) similarities for a batch of embeddings."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    return z @ _bank_matrix(bank).T


def topk_mine(similarities, k: int):
    """Indices and values of the k largest similarities, ties to lowest index."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 1:
        raise ValueError(f"topk_mine: expected a similarity vector, got shape {sims.shape}")
    if not 0 <= k <= sims.shape[0]:
        raise ValueError(f"topk_mine: k={k} outside [0, {sims.shape[0]}]")
    order = np.argsort(-sims, kind="stable")[:k]
    return sims[order], order


def _topk_rows(sims: np.ndarray, k: int) -> np.ndarray:
    if not 0 <= k <= sims.shape[1]:
        raise ValueError(f"topk_mine: k={k} outside [0, {sims.shape[1]}]")
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def _as_batch(z) -> Tensor:
    t = ad.as_tensor(z)
    if t.ndim == 1:
        t = t.reshape((1, t.shape[0]))
    if t.ndim != 2:
        raise ValueError(f"loss: embeddings must be (B, d) or (d,), got {t.shape}")
    return t


def _ratio_loss(z: Tensor, z_hat: np.ndarray, matrix: np.ndarray, tau: float,
                positive_idx: np.ndarray, context=None) -> Tensor:
    """Mean over the batch of lse(denominator) - lse(numerator).

    Denominator logits: the augmented-positive similarity plus every
    (optionally context-weighted) bank similarity; numerator logits: the
    augmented positive plus the mined subset. ``context`` may be a constant
    array or a Tensor, in which case gradients flow into it.
    """
    if tau <= 0:
        raise ValueError(f"loss: temperature {tau} must be positive")
    scale = 1.0 / float(tau)
    pos = (z * z_hat).sum(axes=(1,)).reshape((z.shape[0], 1))
    sims = ad.matmul(z, matrix.T)
    weighted = sims if context is None else sims * context
    mined = weighted.gather(positive_idx)
    den = ad.concat([pos, weighted], axis=1) * scale
    num = ad.concat([pos, mined], axis=1) * scale
    per_sample = den.logsumexp() - num.logsumexp()
    return per_sample.mean()


def _prepare(z, z_hat, bank):
    zt = _as_batch(z)
    zh = np.asarray(z_hat.data if isinstance(z_hat, Tensor) else z_hat, dtype=np.float64)
    if zh.ndim == 1:
        zh = zh[None, :]
    if zh.shape != zt.shape:
        raise ValueError(f"loss: query {zt.shape} and key {zh.shape} shapes differ")
    return zt, zh, _bank_matrix(bank)


def loss_infonce(z, z_hat, bank, tau: float) -> Tensor:
    """Instance discrimination: one augmented positive against the bank."""
    zt, zh, matrix = _prepare(z, z_hat, bank)
    if tau <= 0:
        raise ValueError(f"loss: temperature {tau} must be positive")
    scale = 1.0 / float(tau)
    pos = (zt * zh).sum(axes=(1,)).reshape((zt.shape[0], 1))
    sims = ad.matmul(zt, matrix.T)
    den = ad.concat([pos, sims], axis=1) * scale
    per_sample = den.logsumexp() - (pos * scale).reshape((zt.shape[0],))
    return per_sample.mean()


def loss_km(z, z_hat, bank, tau: float, k: int) -> Tensor:
    """Knowledge mining: the top-k most similar bank entries join the positives."""
    zt, zh, matrix = _prepare(z, z_hat, bank)
    idx = _topk_rows(compute_context_batch(zt.data, matrix), k)
    return _ratio_loss(zt, zh, matrix, tau, idx)


def loss_cross_directed(z_u, z_hat_u, bank_u, context_v, n_plus_v, tau: float) -> Tensor:
    """One directed term: view v's context steers view u's contrastive loss.

    ``context_v`` holds the guiding view's similarities s^v, index-aligned
    with ``bank_u``; bank similarities are weighted as s^u_i * s^v_i and the
    mined set ``n_plus_v`` comes from the guiding view.
    """
    zt, zh, matrix = _prepare(z_u, z_hat_u, bank_u)
    ctx = context_v if isinstance(context_v, Tensor) else \
        ad.as_tensor(np.asarray(context_v, dtype=np.float64))
    if ctx.ndim == 1:
        ctx = ctx.reshape((1, ctx.shape[0]))
    if ctx.shape != (zt.shape[0], matrix.shape[0]):
        raise ValueError(f"loss_cross_directed: context shape {ctx.shape} does not "
                         f"match batch {zt.shape[0]} x bank {matrix.shape[0]}")
    idx = np.asarray(n_plus_v, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (zt.shape[0], idx.shape[0])).copy()
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        raise ValueError("loss_cross_directed: mined index out of bank range")
    return _ratio_loss(zt, zh, matrix, tau, idx, context=ctx)


class ViewState(NamedTuple):
    """Per-view ingredients of the multi-view objective."""

    z: Tensor
    z_hat: np.ndarray
    bank: object  # MemoryBank or matrix


def cross_view_terms(view_states, tau: float, k: int,
                     guide_grad: bool = False) -> dict[tuple[int, int], Tensor]:
    """All directed losses keyed by (source view, target view)."""
    states = list(view_states)
    if len(states) < 2:
        raise ValueError(f"loss_cross_total: need at least 2 views, got {len(states)}")
    matrices = [_bank_matrix(s.bank) for s in states]
    sizes = {m.shape[0] for m in matrices}
    if len(sizes) != 1:
        raise ValueError(f"loss_cross_total: banks are not index-aligned, sizes {sizes}")

    contexts, mined = [], []
    for state, matrix in zip(states, matrices):
        raw = compute_context_batch(state.z.data, matrix)
        mined.append(_topk_rows(raw, k))
        if guide_grad:
            contexts.append(ad.matmul(_as_batch(state.z), matrix.T))
        else:
            contexts.append(raw)

    terms = {}
    for u, target in enumerate(states):
        for v, _source in enumerate(states):
            if u == v:
                continue
            terms[(v, u)] = loss_cross_directed(target.z, target.z_hat, matrices[u],
                                                contexts[v], mined[v], tau)
    return terms


def loss_cross_total(view_states, tau: float, k: int, guide_grad: bool = False) -> Tensor:
    """Sum of every directed cross-view term, U * (U - 1) in all."""
    terms = cross_view_terms(view_states, tau, k, guide_grad)
    total = None
    for key in sorted(terms):
        total = terms[key] if total is None else total + terms[key]
    return total
