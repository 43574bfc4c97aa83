"""Per-round LoRA rank selection under memory and latency constraints.

Candidates are tried from the largest rank down. A rank is taken as soon as
its predicted memory fits the device's available memory and its predicted
training latency fits the round deadline; memory is checked first and the
latency table is only consulted for ranks that fit in memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .errors import UnknownRank
from .lora import BYTES_PER_PARAM

DEFAULT_RANKS = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class LutEntry:
    memory: float  # bytes
    latency: float  # seconds


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    memory_capacity: float
    lut: Mapping[int, LutEntry]
    peak_power: float
    background_load: float = 0.0

    def __post_init__(self):
        lut = {int(r): e if isinstance(e, LutEntry) else LutEntry(*e) for r, e in self.lut.items()}
        object.__setattr__(self, "lut", dict(sorted(lut.items())))
        if self.peak_power <= 0:
            raise ValueError("peak_power must be positive")
        if not 0.0 <= self.background_load < 1.0:
            raise ValueError("background_load must be in [0, 1)")
        entries = list(self.lut.values())
        for lo, hi in zip(entries, entries[1:]):
            if not (hi.memory > lo.memory and hi.latency > lo.latency):
                raise ValueError(f"{self.name}: LUT must be strictly increasing in rank")

    def with_load(self, load: float) -> "DeviceProfile":
        return replace(self, background_load=load)


@dataclass(frozen=True)
class RankCheck:
    rank: int
    mem_ok: bool
    lat_ok: bool | None  # None: latency never consulted (memory failed)


@dataclass(frozen=True)
class RankDecision:
    selected: int | None
    checked: tuple[RankCheck, ...] = field(default_factory=tuple)


def _entry(profile: DeviceProfile, r: int) -> LutEntry:
    try:
        return profile.lut[r]
    except KeyError:
        raise UnknownRank(f"rank {r} not profiled for {profile.name}") from None


def predict_memory(profile: DeviceProfile, r: int) -> float:
    return _entry(profile, r).memory


def predict_latency(profile: DeviceProfile, r: int) -> float:
    """LUT latency inflated by background load: ``t / (1 - load)``."""
    return _entry(profile, r).latency / (1.0 - profile.background_load)


def available_memory(profile: DeviceProfile) -> float:
    return profile.memory_capacity * (1.0 - profile.background_load)


def select_rank(profile: DeviceProfile, available_memory: float, deadline: float,
                ranks: Iterable[int] = DEFAULT_RANKS) -> RankDecision:
    ranks = sorted(set(ranks), reverse=True)
    if not ranks:
        raise ValueError("candidate rank set is empty")
    checked = []
    for r in ranks:
        mem_ok = predict_memory(profile, r) <= available_memory
        if not mem_ok:
            checked.append(RankCheck(r, False, None))
            continue
        lat_ok = predict_latency(profile, r) <= deadline
        checked.append(RankCheck(r, True, lat_ok))
        if lat_ok:
            return RankDecision(r, tuple(checked))
    return RankDecision(None, tuple(checked))


# --- analytic LUTs for the toy model -----------------------------------------


def analytic_memory(d: int, k: int, r: int, activation_bytes: float) -> float:
    """Adapter params + two optimizer slots per param + activation buffer."""
    params = r * (d + k)
    return BYTES_PER_PARAM * 3 * params + activation_bytes


def analytic_lut(d: int, k: int, ranks: Iterable[int], *, throughput: float,
                 work_items: int, activation_bytes: float = 0.0,
                 fixed_latency: float = 0.0) -> dict[int, LutEntry]:
    """Toy-model LUT.

    Latency counts multiply-adds of the frozen forward pass plus the low-rank
    forward/backward (three passes over ``r * (d + k)`` params) per work item,
    divided by ``throughput`` (MACs per second).
    """
    lut = {}
    for r in sorted(set(ranks)):
        macs = work_items * (d * k + 3 * r * (d + k))
        lut[r] = LutEntry(
            memory=analytic_memory(d, k, r, activation_bytes),
            latency=fixed_latency + macs / throughput,
        )
    return lut


# Peak power from the edge-device hardware table; throughput scales with TOPS.
DEVICE_PRESETS = {
    "orin_nx": {"peak_power": 25.0, "tops": 100.0, "memory_gb": 16.0},
    "orin_nano": {"peak_power": 15.0, "tops": 40.0, "memory_gb": 8.0},
}
