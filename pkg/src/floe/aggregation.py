"""Server-side aggregation of client adapters.

Pipeline per round: encode each uploaded adapter into a unit embedding,
cluster the embeddings (silhouette-selected count), then average each
cluster's weight updates. Averaging happens on ``B @ A`` rather than on the
factors so clients with different ranks can be combined; the mean is
refactored back to the largest member rank.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lora
from .errors import DegenerateClustering, DegenerateVector, ShapeMismatch
from .lora import LoraAdapter
from .numerics import kmeans_silhouette
from .rng import derive

EMBED_DIM = 64
SILHOUETTE_FLOOR = 0.15
MIN_UPDATES_FOR_CLUSTERING = 4


@dataclass(frozen=True, eq=False)
class AdapterUpdate:
    adapter: LoraAdapter
    client_id: str
    start_time: float = 0.0
    task_embedding: np.ndarray | None = None


@dataclass(eq=False)
class ClusterModel:
    cluster_id: int
    member_ids: list[str]
    centroid_embedding: np.ndarray
    theta: LoraAdapter | None = None
    silhouette: float | None = None


@dataclass(frozen=True)
class DpParams:
    clip_c: float
    sigma_noise: float = 0.0

    def __post_init__(self):
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")


# --- encoding -----------------------------------------------------------------

_projection_cache: dict[tuple[int, int, int], np.ndarray] = {}
_projection_lock = threading.Lock()


def _projection(n_in: int, dim: int, seed: int) -> np.ndarray:
    key = (n_in, dim, seed)
    with _projection_lock:
        proj = _projection_cache.get(key)
        if proj is None:
            proj = derive(seed, "encoder", n_in, dim).normal(size=(dim, n_in)) / np.sqrt(dim)
            proj.setflags(write=False)
            _projection_cache[key] = proj
    return proj


def encode_adapter(update: AdapterUpdate | LoraAdapter, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    """Unit embedding of an adapter.

    ``flatten(B @ A)`` goes through a fixed seeded Gaussian projection to
    ``dim`` and is normalized; a task embedding, when present, is appended
    and the whole vector renormalized.
    """
    if isinstance(update, LoraAdapter):
        update = AdapterUpdate(update, client_id="")
    flat = update.adapter.delta_w().ravel()
    z = _projection(flat.size, dim, seed) @ flat
    norm = np.linalg.norm(z)
    z = z / norm if norm > 0 else np.zeros(dim)
    if update.task_embedding is not None:
        z = np.concatenate([z, np.asarray(update.task_embedding, dtype=np.float64)])
    total = np.linalg.norm(z)
    if total == 0:
        raise DegenerateVector(f"adapter from {update.client_id!r} has zero update and no task embedding")
    return z / total


# --- clustering ---------------------------------------------------------------


@dataclass(frozen=True)
class Clustering:
    clusters: list[ClusterModel]
    silhouette: float | None
    fallback: str | None  # why a single cluster was used, if it was


def _canonical_order(updates: Sequence[AdapterUpdate], emb: np.ndarray) -> list[int]:
    return sorted(range(len(updates)), key=lambda i: (updates[i].client_id, emb[i].tobytes()))


def _unit_mean(vectors: np.ndarray) -> np.ndarray:
    m = vectors.mean(axis=0)
    n = np.linalg.norm(m)
    return m / n if n > 0 else vectors[0]


def cluster_updates(updates: Sequence[AdapterUpdate], m_max: int = 8, seed: int = 0,
                    silhouette_floor: float = SILHOUETTE_FLOOR, embed_seed: int = 0) -> Clustering:
    """Group updates by embedding similarity.

    Fewer than four updates, a degenerate embedding set, or a best silhouette
    below ``silhouette_floor`` all yield a single cluster. The result does not
    depend on the order of ``updates``.
    """
    if not updates:
        raise ValueError("no updates to cluster")
    emb = np.array([encode_adapter(u, seed=embed_seed) for u in updates])
    order = _canonical_order(updates, emb)
    emb_sorted = emb[order]

    labels = np.zeros(len(updates), dtype=int)
    score = None
    fallback = None
    m_hi = min(len(updates) - 1, m_max)
    if len(updates) < MIN_UPDATES_FOR_CLUSTERING or m_hi < 2:
        fallback = "too_few_updates"
    else:
        try:
            res = kmeans_silhouette(emb_sorted, (2, m_hi), seed=seed)
        except DegenerateClustering:
            fallback = "degenerate"
        else:
            score = res.score
            if res.score < silhouette_floor:
                fallback = "low_silhouette"
            else:
                labels = res.labels

    clusters = []
    for cid in range(int(labels.max()) + 1):
        idx = [order[i] for i in np.flatnonzero(labels == cid)]
        clusters.append(ClusterModel(
            cluster_id=cid,
            member_ids=[updates[i].client_id for i in idx],
            centroid_embedding=_unit_mean(emb[idx]),
            silhouette=score,
        ))
    return Clustering(clusters=clusters, silhouette=score, fallback=fallback)


# --- averaging ----------------------------------------------------------------


def _check_compatible(members: Sequence[AdapterUpdate]) -> None:
    if not members:
        raise ValueError("cannot aggregate zero members")
    first = members[0].adapter
    for m in members[1:]:
        ad = m.adapter
        if (ad.d, ad.k, ad.layer_id) != (first.d, first.k, first.layer_id):
            raise ShapeMismatch(
                f"member {m.client_id!r} is {ad.d}x{ad.k} layer {ad.layer_id}, "
                f"expected {first.d}x{first.k} layer {first.layer_id}")


def _common_tag(members: Sequence[AdapterUpdate]) -> str | None:
    tags = {m.adapter.task_tag for m in members}
    return tags.pop() if len(tags) == 1 else None


def weighted_delta(members: Sequence[AdapterUpdate], weights) -> np.ndarray:
    acc = np.zeros((members[0].adapter.d, members[0].adapter.k))
    for m, w in zip(members, weights):
        acc += w * m.adapter.delta_w()
    return acc


def _refactor_mean(members: Sequence[AdapterUpdate], weights) -> LoraAdapter:
    first = members[0].adapter
    rank = min(max(m.adapter.rank for m in members), first.d, first.k)
    mean = weighted_delta(members, weights)
    return lora.refactor(mean, rank, first.layer_id, _common_tag(members))


def aggregate_cluster(members: Sequence[AdapterUpdate]) -> LoraAdapter:
    """Uniform mean of member updates."""
    _check_compatible(members)
    if len(members) == 1:
        return members[0].adapter
    n = len(members)
    return _refactor_mean(members, np.full(n, 1.0 / n))


def staleness_weights(start_times, beta: float, now: float) -> np.ndarray:
    """Normalized ``exp(-beta * (now - start))``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    staleness = now - np.asarray(start_times, dtype=np.float64)
    if np.any(staleness < 0):
        raise ValueError("an update starts after 'now'")
    # shift by the freshest member; the ratio is unchanged and nothing underflows
    logits = -beta * (staleness - staleness.min())
    w = np.exp(logits)
    return w / w.sum()


def aggregate_async(members: Sequence[AdapterUpdate], beta: float, now: float) -> LoraAdapter:
    _check_compatible(members)
    weights = staleness_weights([m.start_time for m in members], beta, now)
    if len(members) == 1:
        return members[0].adapter
    return _refactor_mean(members, weights)


# --- differential privacy -----------------------------------------------------


def clip(delta_w: np.ndarray, clip_c: float) -> np.ndarray:
    norm = np.linalg.norm(delta_w)
    if norm > clip_c:
        return delta_w * (clip_c / norm)
    return np.array(delta_w, dtype=np.float64, copy=True)


def dp_perturb(delta_w, dp: DpParams, rng: np.random.Generator) -> np.ndarray:
    """Clip to Frobenius norm ``C`` then add N(0, (sigma*C)^2) per entry."""
    out = clip(np.asarray(delta_w, dtype=np.float64), dp.clip_c)
    if dp.sigma_noise > 0:
        out = out + rng.normal(0.0, dp.sigma_noise * dp.clip_c, size=out.shape)
    return out


def privatize(adapter: LoraAdapter, dp: DpParams, rng: np.random.Generator) -> LoraAdapter:
    """Perturb an adapter's update and refactor it to the same rank."""
    noisy = dp_perturb(adapter.delta_w(), dp, rng)
    return lora.refactor(noisy, adapter.rank, adapter.layer_id, adapter.task_tag)


# --- on-disk manifest ---------------------------------------------------------


def write_cluster_manifest(clusters: Sequence[ClusterModel], out_dir: str | Path,
                           prefix: str = "cluster") -> Path:
    """Write each cluster's adapter as ``.flra`` plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clusters:
        entry = {
            "cluster_id": c.cluster_id,
            "members": list(c.member_ids),
            "silhouette": c.silhouette,
            "centroid": [float(x) for x in c.centroid_embedding],
            "task_tag": c.theta.task_tag if c.theta is not None else None,
            "adapter": None,
        }
        if c.theta is not None:
            name = f"{prefix}_{c.cluster_id}.flra"
            lora.save(c.theta, out_dir / name)
            entry["adapter"] = name
        entries.append(entry)
    path = out_dir / "clusters.json"
    path.write_text(json.dumps({"clusters": entries}, indent=2, sort_keys=True) + "\n")
    return path


def read_cluster_manifest(path: str | Path) -> list[ClusterModel]:
    path = Path(path)
    data = json.loads(path.read_text())
    out = []
    for e in data["clusters"]:
        theta = None
        if e.get("adapter"):
            theta = lora.load(path.parent / e["adapter"], task_tag=e.get("task_tag"))
        out.append(ClusterModel(
            cluster_id=e["cluster_id"], member_ids=list(e["members"]),
            centroid_embedding=np.asarray(e["centroid"], dtype=np.float64),
            theta=theta, silhouette=e.get("silhouette"),
        ))
    return out
