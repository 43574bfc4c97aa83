import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from floe.errors import UnknownRank
from floe.rank_select import (
    DeviceProfile,
    LutEntry,
    analytic_lut,
    available_memory,
    predict_latency,
    select_rank,
)

GB = 1 << 30


def _profile(mem, lat, load=0.0):
    lut = {r: LutEntry(m, t) for r, m, t in zip(sorted(mem), [mem[r] for r in sorted(mem)],
                                                  [lat[r] for r in sorted(lat)])}
    return DeviceProfile("dev", 16 * GB, lut, peak_power=25.0, background_load=load)


def brute_force(profile, avail, deadline, ranks):
    """Enumerate every rank; keep those satisfying both constraints; take max."""
    feasible = [r for r in ranks
                if profile.lut[r].memory <= avail
                and profile.lut[r].latency / (1 - profile.background_load) <= deadline]
    return max(feasible) if feasible else None


def random_profile(rng, ranks):
    mem = np.cumsum(rng.uniform(0.1, 3.0, size=len(ranks))) * GB
    lat = np.cumsum(rng.uniform(0.1, 5.0, size=len(ranks)))
    lut = {r: LutEntry(float(m), float(t)) for r, m, t in zip(ranks, mem, lat)}
    return DeviceProfile("rand", 16 * GB, lut, peak_power=15.0,
                         background_load=float(rng.uniform(0, 0.9)))


class TestPredictLatency:
    def test_no_load(self):
        p = _profile({4: 1.0, 8: 2.0}, {4: 3.0, 8: 5.0})
        assert predict_latency(p, 8) == 5.0

    def test_half_load_doubles(self):
        p = _profile({4: 1.0, 8: 2.0}, {4: 3.0, 8: 5.0}, load=0.5)
        assert predict_latency(p, 8) == 10.0

    def test_unknown_rank(self):
        p = _profile({4: 1.0}, {4: 1.0})
        with pytest.raises(UnknownRank):
            predict_latency(p, 16)


class TestSelectRank:
    def test_all_feasible_takes_largest(self):
        p = _profile({4: 1.0, 8: 2.0, 16: 3.0}, {4: 1.0, 8: 2.0, 16: 3.0})
        dec = select_rank(p, 10.0, 10.0, {4, 8, 16})
        assert dec.selected == 16
        assert [c.rank for c in dec.checked] == [16]

    def test_zero_deadline(self):
        p = _profile({4: 1.0, 8: 2.0}, {4: 0.5, 8: 1.0})
        dec = select_rank(p, 10.0, 0.0, {4, 8})
        assert dec.selected is None
        assert all(c.mem_ok and c.lat_ok is False for c in dec.checked)

    def test_memory_budget(self):
        p = _profile({4: 1 * GB, 8: 3 * GB, 16: 9 * GB}, {4: 1.0, 8: 1.0 + 1e-9, 16: 1.0 + 2e-9})
        dec = select_rank(p, 4 * GB, 100.0, {4, 8, 16})
        assert dec.selected == brute_force(p, 4 * GB, 100.0, [4, 8, 16]) == 8
        assert dec.checked[0].mem_ok is False and dec.checked[0].lat_ok is None

    def test_decision_flags_consistent(self):
        rng = np.random.default_rng(0)
        ranks = [2, 4, 8, 16, 32]
        for _ in range(200):
            p = random_profile(rng, ranks)
            dec = select_rank(p, rng.uniform(0, 10) * GB, rng.uniform(0, 20), ranks)
            if dec.selected is not None:
                last = dec.checked[-1]
                assert last.rank == dec.selected and last.mem_ok and last.lat_ok

    def test_oracle_equivalence_sampled(self):
        rng = np.random.default_rng(1)
        ranks = [2, 4, 8, 16, 32]
        for _ in range(2000):
            p = random_profile(rng, ranks)
            avail = rng.uniform(0, 12) * GB
            deadline = rng.uniform(0, 30)
            assert select_rank(p, avail, deadline, ranks).selected == brute_force(p, avail, deadline, ranks)

    @given(st.integers(0, 2**32 - 1), st.floats(0, 12), st.floats(0, 12), st.floats(0, 30), st.floats(0, 30))
    def test_monotone_in_budget_and_deadline(self, seed, m1, m2, t1, t2):
        ranks = [2, 4, 8, 16, 32]
        p = random_profile(np.random.default_rng(seed), ranks)
        lo_m, hi_m = sorted((m1 * GB, m2 * GB))
        lo_t, hi_t = sorted((t1, t2))
        as_int = lambda r: -1 if r is None else r
        assert as_int(select_rank(p, lo_m, lo_t, ranks).selected) <= as_int(select_rank(p, hi_m, lo_t, ranks).selected)
        assert as_int(select_rank(p, lo_m, lo_t, ranks).selected) <= as_int(select_rank(p, lo_m, hi_t, ranks).selected)

    def test_empty_rank_set(self):
        p = _profile({4: 1.0}, {4: 1.0})
        with pytest.raises(ValueError):
            select_rank(p, 1.0, 1.0, [])


class TestProfile:
    def test_non_monotone_lut_rejected(self):
        with pytest.raises(ValueError):
            DeviceProfile("x", GB, {4: (2.0, 1.0), 8: (1.0, 2.0)}, peak_power=1.0)

    def test_available_memory(self):
        p = _profile({4: 1.0}, {4: 1.0}, load=0.25)
        assert available_memory(p) == 12 * GB

    def test_analytic_lut_increasing(self):
        lut = analytic_lut(16, 16, [2, 4, 8], throughput=1e6, work_items=100, activation_bytes=64)
        assert lut[2].memory == 4 * 3 * 2 * 32 + 64
        mems = [e.memory for e in lut.values()]
        lats = [e.latency for e in lut.values()]
        assert mems == sorted(mems) and lats == sorted(lats)
