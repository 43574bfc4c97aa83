"""Per-token latency against cloud RTT for fused decoding sessions."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..events import EventQueue
from ..fusion import FusionConfig, SimulatedCloudChannel, TimedModel, generate
from ..rng import derive
from .toy import ToyLM


@dataclass(frozen=True)
class SweepPoint:
    rtt: float
    mean_latency: float
    max_latency: float
    fallback_rate: float
    tokens: int


@dataclass(frozen=True)
class SweepSetup:
    slm: ToyLM
    llm: ToyLM
    t_slm: float = 0.065
    t_cloud: float = 0.010
    sessions: int = 8
    max_tokens: int = 16
    seed: int = 0

    @property
    def masking_bound(self) -> float:
        return self.t_slm - self.t_cloud


def toy_pair(vocab_size: int = 32, seed: int = 0) -> tuple[ToyLM, ToyLM]:
    rng = derive(seed, "sweep-models")
    base = rng.normal(size=(vocab_size, vocab_size))
    return ToyLM(base), ToyLM(base + rng.normal(scale=0.5, size=(vocab_size, vocab_size)))


def _run_point(rtt: float, setup: SweepSetup, config: FusionConfig) -> SweepPoint:
    slm = TimedModel(setup.slm.logits, setup.t_slm)
    lat, falls = [], 0
    for s in range(setup.sessions):
        rng = derive(setup.seed, "sweep-prompt", s)
        prompt = [int(rng.integers(setup.slm.vocab_size))]
        cloud = SimulatedCloudChannel(setup.llm.logits, lambda: rtt, setup.t_cloud)
        gen = generate(prompt, slm, cloud, config, setup.max_tokens, clock=EventQueue())
        lat.extend(r.latency for r in gen.trace.records)
        falls += gen.trace.fallback_count
    return SweepPoint(rtt, float(np.mean(lat)), float(np.max(lat)), falls / len(lat), len(lat))


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("FLOE_SIM_THREADS", "1")))
    except ValueError:
        return 1


def latency_sweep(rtts, config: FusionConfig, setup: SweepSetup, threads: int | None = None) -> list[SweepPoint]:
    """One point per RTT; points are independent and may run in parallel."""
    rtts = [float(r) for r in rtts]
    if len(rtts) < 2:
        raise ValueError("a sweep needs at least two RTT points")
    if any(r < 0 or math.isnan(r) for r in rtts):
        raise ValueError("RTT values must be non-negative")
    threads = threads or sweep_threads()
    if threads == 1:
        return [_run_point(r, setup, config) for r in rtts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: _run_point(r, setup, config), rtts))
