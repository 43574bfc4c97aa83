"""Bigram toy language models, synthetic domains and local LoRA training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import lora
from ..errors import InfeasibleRank, ShapeMismatch, UnknownRank
from ..lora import LoraAdapter
from ..numerics import as_matrix
from ..rank_select import DeviceProfile, available_memory, predict_memory
from ..rng import derive


@dataclass(frozen=True, eq=False)
class ToyLM:
    """Next-token logits ``W[:, prev] + B A[:, prev]``; columns index the previous token."""

    w: np.ndarray
    adapter: LoraAdapter | None = None

    def __post_init__(self):
        w = as_matrix(self.w)
        if w.shape[0] != w.shape[1]:
            raise ShapeMismatch("bigram table must be square")
        if not np.all(np.isfinite(w)):
            raise ValueError("bigram table has non-finite entries")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        if self.adapter is not None and (self.adapter.d, self.adapter.k) != w.shape:
            raise ShapeMismatch(f"adapter {self.adapter.d}x{self.adapter.k} vs table {w.shape}")

    @property
    def vocab_size(self) -> int:
        return self.w.shape[0]

    def with_adapter(self, adapter: LoraAdapter | None) -> "ToyLM":
        return ToyLM(self.w, adapter)

    def table(self) -> np.ndarray:
        if self.adapter is None or self.adapter.rank == 0:
            return np.array(self.w)
        return self.w + self.adapter.delta_w()

    def logits(self, prefix: Sequence[int]) -> np.ndarray:
        prev = int(prefix[-1])
        col = self.w[:, prev]
        if self.adapter is not None and self.adapter.rank:
            col = col + self.adapter.b @ self.adapter.a[:, prev]
        return col


# --- synthetic domains --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DomainSet:
    """A shared frozen base table and one target table per domain.

    Each domain's target is the base plus ``divergence`` times a domain
    specific low-rank shift, so a small adapter can represent it.
    """

    base: np.ndarray
    targets: tuple[np.ndarray, ...]

    @property
    def vocab_size(self) -> int:
        return self.base.shape[0]


def make_domains(vocab_size: int, n_domains: int, divergence: float, seed: int,
                 shift_rank: int = 2, base_scale: float = 1.0) -> DomainSet:
    rng = derive(seed, "domains", "base")
    base = rng.normal(0.0, base_scale, size=(vocab_size, vocab_size))
    targets = []
    for d in range(n_domains):
        r = derive(seed, "domains", d)
        u = r.normal(size=(vocab_size, shift_rank))
        v = r.normal(size=(shift_rank, vocab_size))
        shift = u @ v / np.sqrt(shift_rank)
        targets.append(base + divergence * shift)
    return DomainSet(base, tuple(targets))


def sample_pairs(target: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` (prev, next) pairs: prev uniform, next from the target column."""
    v = target.shape[0]
    probs = np.exp(target - target.max(axis=0))
    probs /= probs.sum(axis=0)
    prev = rng.integers(0, v, size=n)
    cdf = np.cumsum(probs, axis=0)
    u = rng.random(n)
    nxt = np.array([min(int(np.searchsorted(cdf[:, p], x, side="right")), v - 1) for p, x in zip(prev, u)])
    return np.stack([prev, nxt], axis=1)


def pair_counts(pairs: np.ndarray, vocab_size: int) -> np.ndarray:
    """Matrix ``N[next, prev]`` of pair counts."""
    n = np.zeros((vocab_size, vocab_size))
    np.add.at(n, (pairs[:, 1], pairs[:, 0]), 1.0)
    return n


def _column_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def nll(table: np.ndarray, pairs: np.ndarray) -> float:
    """Mean negative log-likelihood of ``pairs`` under a bigram logit table."""
    z = table - table.max(axis=0)
    logp = z - np.log(np.exp(z).sum(axis=0))
    return float(-logp[pairs[:, 1], pairs[:, 0]].mean())


def perplexity(model: ToyLM, pairs: np.ndarray) -> float:
    return float(np.exp(nll(model.table(), pairs)))


# --- training -----------------------------------------------------------------


def lora_grads(w: np.ndarray, a: np.ndarray, b: np.ndarray, counts: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the pairs in ``counts`` and its gradients in A and B."""
    n = counts.sum()
    z = w + b @ a
    p = _column_softmax(z)
    col = counts.sum(axis=0)
    logp = np.log(np.maximum(p, 1e-300))
    loss = float(-(counts * logp).sum() / n)
    g = (p * col - counts) / n
    return loss, b.T @ g, g @ a.T


def check_feasible(profile: DeviceProfile, rank: int, vocab_size: int) -> None:
    if rank > vocab_size:
        raise InfeasibleRank(f"rank {rank} exceeds vocabulary size {vocab_size}")
    try:
        mem = predict_memory(profile, rank)
    except UnknownRank:
        raise InfeasibleRank(f"rank {rank} not profiled for {profile.name}") from None
    if mem > available_memory(profile):
        raise InfeasibleRank(f"rank {rank} needs {mem:.0f} B, {profile.name} has {available_memory(profile):.0f} B")


def train_local(pairs: np.ndarray, base: ToyLM, start: LoraAdapter, epochs: int, lr: float,
                rng: np.random.Generator, batch_size: int = 32) -> LoraAdapter:
    """Minibatch SGD on A and B only; the base table stays frozen."""
    if (start.d, start.k) != base.w.shape:
        raise ShapeMismatch("adapter does not match the base table")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    a, b = np.array(start.a), np.array(start.b)
    if epochs == 0 or start.rank == 0 or len(pairs) == 0:
        return start
    v = base.vocab_size
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for lo in range(0, len(order), batch_size):
            counts = pair_counts(pairs[order[lo:lo + batch_size]], v)
            _, ga, gb = lora_grads(base.w, a, b, counts)
            a -= lr * ga
            b -= lr * gb
    return LoraAdapter(a, b, start.layer_id, start.task_tag)


def train_client(profile: DeviceProfile, pairs: np.ndarray, base: ToyLM, start: LoraAdapter,
                 epochs: int, lr: float, rng: np.random.Generator, batch_size: int = 32) -> LoraAdapter:
    """``train_local`` behind the device feasibility check."""
    check_feasible(profile, start.rank, base.vocab_size)
    return train_local(pairs, base, start, epochs, lr, rng, batch_size)


def initial_adapter(vocab_size: int, rank: int, seed: int) -> LoraAdapter:
    """The round-one broadcast: identical for every client of a given rank."""
    return lora.create(vocab_size, vocab_size, rank, derive(seed, "init", rank))
