"""Federated fleet: device profiles, synchronous deadline rounds and async cluster updates."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import lora
from ..aggregation import (
    AdapterUpdate,
    ClusterModel,
    DpParams,
    aggregate_async,
    aggregate_cluster,
    cluster_updates,
    encode_adapter,
    privatize,
)
from ..events import EventQueue, to_ns
from ..lora import LoraAdapter
from ..rank_select import (
    DEVICE_PRESETS,
    DeviceProfile,
    analytic_lut,
    available_memory,
    predict_latency,
    select_rank,
)
from ..rng import derive, derive_int
from .toy import DomainSet, ToyLM, initial_adapter, make_domains, perplexity, sample_pairs, train_client

DEFAULT_BANDWIDTH = 100e6  # bytes/s


@dataclass(frozen=True)
class RttModel:
    kind: str = "constant"  # constant(a) | uniform(a, b) | lognormal(mu=a, sigma=b)
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ValueError(f"unknown rtt model {self.kind!r}")
        if self.kind == "uniform" and not 0 <= self.a <= self.b:
            raise ValueError("uniform rtt needs 0 <= lo <= hi")
        if self.kind == "constant" and self.a < 0:
            raise ValueError("rtt must be non-negative")

    def sampler(self, rng: np.random.Generator) -> Callable[[], float]:
        if self.kind == "constant":
            return lambda: self.a
        if self.kind == "uniform":
            return lambda: float(rng.uniform(self.a, self.b))
        return lambda: float(rng.lognormal(self.a, self.b))


@dataclass(frozen=True)
class SimConfig:
    n_clients: int = 10
    device_mix: Mapping[str, float] = field(default_factory=lambda: {"orin_nx": 0.5, "orin_nano": 0.5})
    round_deadline: float = 2.0
    ranks: tuple[int, ...] = (2, 4, 8)
    rtt: RttModel = RttModel()
    bandwidth: float = DEFAULT_BANDWIDTH
    beta: float = 0.1
    dp: DpParams | None = None
    seed: int = 0
    local_epochs: int = 3
    lr: float = 0.5
    batch_size: int = 32
    vocab_size: int = 16
    n_domains: int = 2
    divergence: float = 1.5
    pairs_per_client: int = 200
    heldout_pairs: int = 500
    rounds: int = 3
    load_max: float = 0.5
    m_max: int = 8
    async_window: int = 8
    # LUT scale: the profiled SLM is much larger than the toy table
    model_dim: int = 2048
    work_items: int = 200_000
    utilization: float = 0.02
    base_footprint: float = 2e9

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if abs(sum(self.device_mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in self.device_mix.values()):
            raise ValueError("device_mix fractions must be non-negative and sum to 1")
        unknown = set(self.device_mix) - set(DEVICE_PRESETS)
        if unknown:
            raise ValueError(f"unknown device kinds {sorted(unknown)}")
        if self.round_deadline < 0:
            raise ValueError("round_deadline must be non-negative")
        for name in ("bandwidth", "lr", "vocab_size", "n_domains", "pairs_per_client", "heldout_pairs", "rounds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.local_epochs < 0 or self.beta < 0:
            raise ValueError("local_epochs and beta must be non-negative")
        if not 0 <= self.load_max < 1:
            raise ValueError("load_max must be in [0, 1)")
        if not self.ranks or any(r < 1 or r > self.vocab_size for r in self.ranks):
            raise ValueError(f"ranks must lie in [1, {self.vocab_size}]")


def preset_profile(kind: str, config: SimConfig) -> DeviceProfile:
    p = DEVICE_PRESETS[kind]
    lut = analytic_lut(config.model_dim, config.model_dim, config.ranks,
                       throughput=p["tops"] * 1e12 * config.utilization,
                       work_items=config.work_items, activation_bytes=config.base_footprint)
    return DeviceProfile(kind, p["memory_gb"] * 1e9, lut, p["peak_power"])


@dataclass(eq=False)
class ClientState:
    client_id: str
    profile: DeviceProfile
    pairs: np.ndarray
    domain: int

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise ValueError(f"client {self.client_id} has no data")


@dataclass(eq=False)
class ServerState:
    base: ToyLM
    clusters: list[ClusterModel] = field(default_factory=list)
    assignment: dict[str, LoraAdapter] = field(default_factory=dict)
    client_cluster: dict[str, int] = field(default_factory=dict)
    windows: dict[int, list[AdapterUpdate]] = field(default_factory=dict)
    clock: EventQueue = field(default_factory=EventQueue)
    round: int = 0


@dataclass
class ClientRound:
    rank: int
    load: float
    latency: float
    bytes_up: int
    bytes_down: int
    energy: float


@dataclass
class RoundReport:
    round: int
    participants: list[str]
    skipped: list[str]
    clients: dict[str, ClientRound]
    cluster_assignments: dict[str, int]
    n_clusters: int
    silhouette: float | None
    fallback: str | None
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _allocate(mix: Mapping[str, float], n: int) -> list[str]:
    """Largest-remainder split of ``n`` clients over device kinds, interleaved."""
    kinds = sorted(mix)
    raw = [mix[k] * n for k in kinds]
    counts = [int(math.floor(x)) for x in raw]
    for i in sorted(range(len(kinds)), key=lambda i: (-(raw[i] - counts[i]), kinds[i]))[: n - sum(counts)]:
        counts[i] += 1
    out = []
    left = dict(zip(kinds, counts))
    while len(out) < n:
        for k in kinds:
            if left[k]:
                out.append(k)
                left[k] -= 1
    return out


@dataclass(eq=False)
class Fleet:
    config: SimConfig
    domains: DomainSet
    clients: list[ClientState]
    heldout: list[np.ndarray]  # per domain

    @property
    def base(self) -> ToyLM:
        return ToyLM(self.domains.base)


def build_fleet(config: SimConfig, same_data: bool = False) -> Fleet:
    """Clients alternate over domains; ``same_data`` gives every client client 0's pairs."""
    domains = make_domains(config.vocab_size, config.n_domains, config.divergence, config.seed)
    kinds = _allocate(config.device_mix, config.n_clients)
    profiles = {k: preset_profile(k, config) for k in set(kinds)}
    clients = []
    for i, kind in enumerate(kinds):
        dom = 0 if same_data else i % config.n_domains
        key = 0 if same_data else i
        pairs = sample_pairs(domains.targets[dom], config.pairs_per_client, derive(config.seed, "data", key))
        clients.append(ClientState(f"c{i:03d}", profiles[kind], pairs, dom))
    heldout = [sample_pairs(t, config.heldout_pairs, derive(config.seed, "heldout", d))
               for d, t in enumerate(domains.targets)]
    return Fleet(config, domains, clients, heldout)


def _start_adapter(state: ServerState, client_id: str, rank: int, config: SimConfig) -> LoraAdapter:
    theta = state.assignment.get(client_id)
    if theta is None or theta.rank == 0:
        return initial_adapter(config.vocab_size, rank, config.seed)
    return lora.compress(theta.delta_w(), rank).to_adapter()


def energy_report(report: RoundReport, profiles: Mapping[str, DeviceProfile]) -> dict[str, float]:
    """Joules per client: peak power times active seconds (an upper bound)."""
    out = {}
    for cid in sorted(set(report.participants) | set(report.skipped)):
        rec = report.clients.get(cid)
        out[cid] = profiles[cid].peak_power * rec.latency if rec is not None else 0.0
    return out


def run_sync_round(state: ServerState, clients: Sequence[ClientState], config: SimConfig) -> RoundReport:
    """Broadcast, rank selection, local training, upload, cluster and aggregate."""
    if not clients:
        raise ValueError("a round needs at least one client")
    state.round += 1
    rnd = state.round
    start_ns = state.clock.now_ns
    q = EventQueue(start_ns)
    updates: list[AdapterUpdate] = []
    records: dict[str, ClientRound] = {}
    skipped: list[str] = []
    v = config.vocab_size
    for idx, c in enumerate(clients):
        load = float(derive(config.seed, "load", rnd, c.client_id).uniform(0.0, config.load_max))
        profile = c.profile.with_load(load)
        decision = select_rank(profile, available_memory(profile), config.round_deadline, config.ranks)
        if decision.selected is None:
            skipped.append(c.client_id)
            continue
        r = decision.selected
        start = _start_adapter(state, c.client_id, r, config)
        trained = train_client(profile, c.pairs, state.base, start, config.local_epochs, config.lr,
                               derive(config.seed, "train", rnd), config.batch_size)
        if config.dp is not None:
            trained = privatize(trained, config.dp, derive(config.seed, "dp", rnd, c.client_id))
        latency = predict_latency(profile, r)
        size = lora.size_report(v, v, r).bytes
        records[c.client_id] = ClientRound(r, load, latency, size, size, c.profile.peak_power * latency)
        q.schedule_in(latency, "upload", AdapterUpdate(trained, c.client_id, start_time=state.clock.now))

    # uploads land in completion order; stragglers never started
    while q:
        ev = q.pop()
        updates.append(ev.payload)
    wall_ns = q.now_ns - start_ns
    state.clock.advance_to(start_ns + wall_ns)

    if not updates:
        return RoundReport(rnd, [], skipped, records, {}, len(state.clusters), None, None, 0.0)

    clustering = cluster_updates(updates, m_max=config.m_max, seed=derive_int(config.seed, "cluster", rnd))
    by_id = {u.client_id: u for u in updates}
    state.clusters = []
    state.windows = {}
    assignments = {}
    for cm in clustering.clusters:
        members = [by_id[m] for m in cm.member_ids]
        cm.theta = aggregate_cluster(members)
        state.clusters.append(cm)
        state.windows[cm.cluster_id] = list(members)
        for m in cm.member_ids:
            assignments[m] = cm.cluster_id
            state.assignment[m] = cm.theta
            state.client_cluster[m] = cm.cluster_id
    return RoundReport(
        round=rnd,
        participants=sorted(by_id),
        skipped=skipped,
        clients=records,
        cluster_assignments=assignments,
        n_clusters=len(clustering.clusters),
        silhouette=clustering.silhouette,
        fallback=clustering.fallback,
        wall_time=wall_ns / 1e9,
    )


# --- asynchronous updates -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimedUpdate:
    arrival: float
    update: AdapterUpdate


@dataclass(frozen=True, eq=False)
class ClusterEvent:
    time: float
    cluster_id: int
    client_id: str
    theta: LoraAdapter


def _nearest_cluster(state: ServerState, emb: np.ndarray) -> int:
    sims = [float(c.centroid_embedding @ emb) for c in state.clusters]
    return state.clusters[int(np.argmax(sims))].cluster_id


def run_async(state: ServerState, stream: Sequence[TimedUpdate], beta: float,
              window: int = 8, embed_seed: int = 0) -> list[ClusterEvent]:
    """Apply each arriving update to its nearest cluster only.

    The touched cluster is re-aggregated over its sliding member window with
    staleness weights; every other cluster is left as is.
    """
    q = EventQueue(state.clock.now_ns)
    for item in stream:
        q.schedule_at(max(to_ns(item.arrival), q.now_ns), "arrive", item.update)
    events = []
    by_id = {c.cluster_id: c for c in state.clusters}
    while q:
        ev = q.pop()
        upd: AdapterUpdate = ev.payload
        emb = encode_adapter(upd, seed=embed_seed)
        if not state.clusters:
            cm = ClusterModel(0, [], emb)
            state.clusters.append(cm)
            by_id[0] = cm
        cid = _nearest_cluster(state, emb)
        cm = by_id[cid]
        members = [m for m in state.windows.get(cid, []) if m.client_id != upd.client_id]
        members = (members + [upd])[-window:]
        state.windows[cid] = members
        cm.theta = aggregate_async(members, beta, q.now)
        cm.member_ids = [m.client_id for m in members]
        embs = np.array([encode_adapter(m, seed=embed_seed) for m in members])
        mean = embs.mean(axis=0)
        cm.centroid_embedding = mean / np.linalg.norm(mean) if np.linalg.norm(mean) > 0 else emb
        state.assignment[upd.client_id] = cm.theta
        state.client_cluster[upd.client_id] = cid
        events.append(ClusterEvent(q.now, cid, upd.client_id, cm.theta))
    state.clock.advance_to(q.now_ns)
    return events


def async_stream(state: ServerState, clients: Sequence[ClientState], config: SimConfig,
                 epoch: int) -> tuple[list[TimedUpdate], list[str]]:
    """One asynchronous pass: each feasible client trains from its current cluster model.

    Clients start at staggered offsets within the round deadline; arrival is
    start + training latency + upload time.
    """
    stream, skipped = [], []
    v = config.vocab_size
    now = state.clock.now
    for c in clients:
        rng = derive(config.seed, "async", epoch, c.client_id)
        load = float(rng.uniform(0.0, config.load_max))
        offset = float(rng.uniform(0.0, max(config.round_deadline, 1e-9)))
        profile = c.profile.with_load(load)
        decision = select_rank(profile, available_memory(profile), math.inf, config.ranks)
        if decision.selected is None:
            skipped.append(c.client_id)
            continue
        r = decision.selected
        start = _start_adapter(state, c.client_id, r, config)
        trained = train_client(profile, c.pairs, state.base, start, config.local_epochs, config.lr,
                               derive(config.seed, "train-async", epoch, c.client_id), config.batch_size)
        if config.dp is not None:
            trained = privatize(trained, config.dp, derive(config.seed, "dp-async", epoch, c.client_id))
        t0 = now + offset
        arrival = t0 + predict_latency(profile, r) + lora.size_report(v, v, r).bytes / config.bandwidth
        stream.append(TimedUpdate(arrival, AdapterUpdate(trained, c.client_id, start_time=t0)))
    return stream, skipped


# --- reporting ----------------------------------------------------------------


@dataclass(frozen=True)
class CommsRecord:
    client_id: str
    rank: int
    bytes_up: int
    bytes_down: int
    transfer_time: float  # one direction
    full_transfer_time: float
    reduction: float  # 1 - adapter / full


def comms_report(report: RoundReport, d: int, k: int, bandwidth: float = DEFAULT_BANDWIDTH) -> list[CommsRecord]:
    """Adapter transfer cost for each participant at model dimensions ``d x k``."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    full = d * k * lora.BYTES_PER_PARAM
    out = []
    for cid in report.participants:
        r = report.clients[cid].rank
        nbytes = lora.size_report(d, k, r).bytes
        out.append(CommsRecord(cid, r, nbytes, nbytes, nbytes / bandwidth, full / bandwidth, 1.0 - nbytes / full))
    return out


def domain_perplexity(state: ServerState, fleet: Fleet) -> list[float]:
    """Held-out perplexity per domain, averaged over that domain's clients' current models."""
    out = []
    for d, pairs in enumerate(fleet.heldout):
        vals = [perplexity(state.base.with_adapter(state.assignment.get(c.client_id)), pairs)
                for c in fleet.clients if c.domain == d]
        out.append(float(np.mean(vals)) if vals else float("nan"))
    return out


@dataclass
class FleetRun:
    reports: list[RoundReport]
    state: ServerState
    perplexity: list[float]
    async_events: list[ClusterEvent] = field(default_factory=list)


def run_fleet(config: SimConfig, mode: str = "sync", fleet: Fleet | None = None) -> FleetRun:
    """``config.rounds`` synchronous rounds, or one sync round then async passes."""
    if mode not in ("sync", "async"):
        raise ValueError("mode must be 'sync' or 'async'")
    fleet = fleet or build_fleet(config)
    state = ServerState(fleet.base)
    reports = [run_sync_round(state, fleet.clients, config)]
    events: list[ClusterEvent] = []
    for epoch in range(1, config.rounds):
        if mode == "sync":
            reports.append(run_sync_round(state, fleet.clients, config))
        else:
            stream, _ = async_stream(state, fleet.clients, config, epoch)
            events.extend(run_async(state, stream, config.beta, config.async_window))
    return FleetRun(reports, state, domain_perplexity(state, fleet), events)
