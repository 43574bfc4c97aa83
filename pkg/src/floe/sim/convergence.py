"""Federated gradient descent on synthetic matrix quadratics with low-rank update compression.

Client ``k`` holds ``F_k(W) = 0.5 * ||W X_k - Y_k||^2``. Each round every
client runs ``E`` local gradient steps from the global ``W``, compresses its
update to rank ``r`` and the server adds the weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import lora
from ..errors import ConfigRejected
from ..rng import derive

STEP_SAFETY = 30.0


@dataclass(frozen=True, eq=False)
class QuadraticClient:
    x: np.ndarray  # k x n
    y: np.ndarray  # d x n

    def grad(self, w: np.ndarray) -> np.ndarray:
        return (w @ self.x - self.y) @ self.x.T

    def loss(self, w: np.ndarray) -> float:
        r = w @ self.x - self.y
        return 0.5 * float(np.sum(r * r))

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.x @ self.x.T).max())


@dataclass(frozen=True)
class ConvergenceParams:
    rounds: int = 200
    rank: int | None = None  # None: no compression
    n_clients: int = 8
    d: int = 6
    k: int = 6
    samples: int = 12
    local_epochs: int = 1
    lr: float | None = None  # default: the largest admissible step
    heterogeneity: float = 1.0
    target_scale: float = 1.0
    eig_range: tuple[float, float] = (0.5, 1.0)
    grad_noise: float = 0.0
    seed: int = 0
    burn_in: int = 10

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.rank is not None and not 1 <= self.rank <= min(self.d, self.k):
            raise ValueError(f"rank must lie in [1, {min(self.d, self.k)}]")
        if self.local_epochs < 1 or self.n_clients < 1:
            raise ValueError("local_epochs and n_clients must be >= 1")


def make_clients(params: ConvergenceParams) -> list[QuadraticClient]:
    """Well-conditioned clients: ``X_k X_k^T`` has eigenvalues in ``eig_range``.

    Targets share a common optimum plus a client-specific offset scaled by
    ``heterogeneity``.
    """
    rng = derive(params.seed, "quadratic")
    w_common = params.target_scale * rng.normal(size=(params.d, params.k))
    lo, hi = params.eig_range
    out = []
    for _ in range(params.n_clients):
        q, _ = np.linalg.qr(rng.normal(size=(params.k, params.k)))
        p, _ = np.linalg.qr(rng.normal(size=(params.samples, params.k)))
        s = np.sqrt(rng.uniform(lo, hi, size=params.k))
        x = q @ np.diag(s) @ p.T
        w_k = w_common + params.heterogeneity * rng.normal(size=(params.d, params.k))
        out.append(QuadraticClient(x, w_k @ x))
    return out


def global_grad(clients, weights, w) -> np.ndarray:
    return sum(p * c.grad(w) for p, c in zip(weights, clients))


def fed_round(w: np.ndarray, clients, weights, lr: float, epochs: int, rank: int | None,
              rng: np.random.Generator | None = None, grad_noise: float = 0.0) -> tuple[np.ndarray, float]:
    """One round; returns the new global model and the smallest retained share seen."""
    step = np.zeros_like(w)
    delta_min = 1.0
    for p, c in zip(weights, clients):
        local = w.copy()
        for _ in range(epochs):
            g = c.grad(local)
            if grad_noise > 0:
                g = g + rng.normal(scale=grad_noise, size=g.shape)
            local -= lr * g
        upd = local - w
        if rank is not None and rank < min(w.shape):
            comp = lora.compress(upd, rank)
            upd = comp.reconstruct()
            delta_min = min(delta_min, comp.achieved_delta)
        step += p * upd
    return w + step, delta_min


@dataclass
class ConvergenceResult:
    grad_sq: np.ndarray  # ||grad F(w_t)||^2, t = 0..T-1
    running_avg: np.ndarray  # (1/t) * sum of the above
    smoothness: float
    kappa_sq: float
    lr: float
    delta_min: float
    trend: tuple[float, float] = field(default=(0.0, 0.0))  # running_avg ~ a / t + b

    @property
    def floor(self) -> float:
        tail = max(1, len(self.grad_sq) // 10)
        return float(self.grad_sq[-tail:].mean())

    def monotone_after(self, burn_in: int, rtol: float = 1e-12) -> bool:
        ra = self.running_avg[burn_in:]
        return bool(np.all(np.diff(ra) <= rtol * np.abs(ra[:-1])))


def convergence_probe(params: ConvergenceParams) -> ConvergenceResult:
    clients = make_clients(params)
    weights = np.full(len(clients), 1.0 / len(clients))
    smooth = max(c.smoothness for c in clients)
    limit = 1.0 / (STEP_SAFETY * smooth * params.local_epochs)
    lr = limit if params.lr is None else params.lr
    if lr <= 0 or lr > limit * (1 + 1e-12):
        raise ConfigRejected(f"step size rejected: {lr:.4g} exceeds 1/(30 L E) = {limit:.4g}")
    w = np.zeros((params.d, params.k))
    g0 = global_grad(clients, weights, w)
    kappa = float(sum(p * np.sum((c.grad(w) - g0) ** 2) for p, c in zip(weights, clients)))
    rng = derive(params.seed, "grad-noise")
    series = np.empty(params.rounds)
    delta_min = 1.0
    for t in range(params.rounds):
        g = global_grad(clients, weights, w)
        series[t] = float(np.sum(g * g))
        w, dm = fed_round(w, clients, weights, lr, params.local_epochs, params.rank, rng, params.grad_noise)
        delta_min = min(delta_min, dm)
    running = np.cumsum(series) / np.arange(1, params.rounds + 1)
    ts = np.arange(1, params.rounds + 1, dtype=float)
    coef, *_ = np.linalg.lstsq(np.stack([1.0 / ts, np.ones_like(ts)], axis=1), running, rcond=None)
    return ConvergenceResult(series, running, smooth, kappa, lr, delta_min, (float(coef[0]), float(coef[1])))
