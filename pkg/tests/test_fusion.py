import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floe.errors import FormatError, InferenceError, InvalidDistribution, InvalidWeight, VocabMismatch
from floe.events import EventQueue
from floe.fusion import (
    FusionConfig,
    LoopbackCloudChannel,
    MlpWeights,
    SimulatedCloudChannel,
    TimedModel,
    decode_frame,
    decode_step,
    encode_frame,
    fuse,
    fusion_weight,
    generate,
)
from floe.numerics import softmax

V = 16


def _const_logits(vec):
    vec = np.asarray(vec, float)
    return lambda prefix: vec


def _bigram(table):
    table = np.asarray(table, float)
    return lambda prefix: table[:, prefix[-1]]


class TestFusionWeight:
    def test_identical(self):
        p = softmax(np.arange(5.0))
        assert fusion_weight(p, p, FusionConfig()) == 0.5

    def test_zero_mlp(self):
        cfg = FusionConfig(weight_mode="mlp", mlp=MlpWeights.zeros(4))
        assert fusion_weight(np.full(4, 0.25), np.eye(4)[0], cfg) == 0.5

    def test_onehot_vs_uniform(self):
        w = fusion_weight(np.eye(V)[3], np.full(V, 1 / V), FusionConfig())
        assert w == pytest.approx(1 / (1 + 1 / 16), abs=1e-12)
        assert w == pytest.approx(0.941, abs=5e-4)

    def test_mismatch(self):
        with pytest.raises(VocabMismatch):
            fusion_weight(np.full(3, 1 / 3), np.full(4, 0.25), FusionConfig())

    def test_unnormalized(self):
        with pytest.raises(InvalidDistribution):
            fusion_weight(np.array([0.5, 0.6]), np.array([0.5, 0.5]), FusionConfig())

    def test_mlp_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = MlpWeights(rng.normal(size=(32, 8)), rng.normal(size=32), rng.normal(size=32), 0.3)
        m.save(tmp_path / "g.npz")
        back = MlpWeights.load(tmp_path / "g.npz")
        p, q = softmax(rng.normal(size=4)), softmax(rng.normal(size=4))
        cfg = FusionConfig(weight_mode="mlp", mlp=m)
        x = np.concatenate([p, q])
        want = 1 / (1 + math.exp(-(m.w2 @ np.tanh(m.w1 @ x + m.b1) + 0.3)))
        assert fusion_weight(p, q, cfg) == pytest.approx(want, abs=1e-12)
        assert fusion_weight(p, q, FusionConfig(weight_mode="mlp", mlp=back)) == pytest.approx(want, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(tau_wait=0)
        with pytest.raises(ValueError):
            FusionConfig(weight_mode="mlp")
        with pytest.raises(ValueError):
            FusionConfig(weight_mode="bogus")


class TestFuse:
    def test_endpoints_exact(self):
        p, q = softmax([1.0, 2.0, 0.5]), softmax([0.3, -1.0, 4.0])
        np.testing.assert_array_equal(fuse(p, q, 1.0), p)
        np.testing.assert_array_equal(fuse(p, q, 0.0), q)

    def test_half(self):
        np.testing.assert_array_equal(fuse([1.0, 0.0], [0.0, 1.0], 0.5), [0.5, 0.5])

    def test_bad_weight(self):
        with pytest.raises(InvalidWeight):
            fuse([1.0, 0.0], [0.0, 1.0], 1.5)
        with pytest.raises(InvalidWeight):
            fuse([1.0, 0.0], [0.0, 1.0], -0.1)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 40), st.floats(0, 1), st.integers(0, 2**31))
    def test_convex_and_valid(self, n, w, seed):
        rng = np.random.default_rng(seed)
        p, q = softmax(rng.normal(size=n) * 3), softmax(rng.normal(size=n) * 3)
        out = fuse(p, q, w)
        assert abs(out.sum() - 1) <= 1e-12
        assert np.all(out >= np.minimum(p, q) - 1e-15)
        assert np.all(out <= np.maximum(p, q) + 1e-15)


class TestDecodeStep:
    def _run(self, delay, t_slm=0.065, tau=0.2, slm=None, llm=None, cloud_compute=0.0):
        slm = TimedModel(slm or _const_logits([2.0, 1.0, 0.0]), t_slm)
        cloud = SimulatedCloudChannel(llm or _const_logits([0.0, 0.0, 9.0]), lambda: delay, cloud_compute)
        clock = EventQueue()
        token, rec = decode_step(slm, cloud, FusionConfig(tau_wait=tau), clock, [0])
        return token, rec, clock

    def test_zero_delay_fuses(self):
        token, rec, _ = self._run(0.0)
        assert rec.cloud_arrived and rec.w < 1
        p, q = softmax([2.0, 1.0, 0.0]), softmax([0.0, 0.0, 9.0])
        w = fusion_weight(p, q, FusionConfig())
        assert rec.w == pytest.approx(w)
        assert token == int(np.argmax(fuse(p, q, w)))
        assert rec.latency == pytest.approx(0.065)

    def test_infinite_delay_falls_back(self):
        token, rec, clock = self._run(float("inf"))
        assert not rec.cloud_arrived and rec.w == 1.0
        assert token == 0
        assert rec.latency == pytest.approx(0.265)
        assert clock.now_ns == 265_000_000

    def test_masked_rtt(self):
        # 50 ms RTT + 10 ms cloud compute hides behind 65 ms local compute
        _, rec, _ = self._run(0.050, cloud_compute=0.010)
        assert rec.cloud_arrived
        assert rec.latency == pytest.approx(0.065, abs=1e-9)
        assert rec.wait == 0.0

    def test_partial_wait(self):
        _, rec, _ = self._run(0.100)
        assert rec.cloud_arrived
        assert rec.wait == pytest.approx(0.035, abs=1e-9)

    def test_exact_deadline_counts_as_arrival(self):
        _, rec, _ = self._run(0.265)
        assert rec.cloud_arrived
        assert rec.latency == pytest.approx(0.265, abs=1e-9)

    def test_one_tick_late(self):
        _, rec, _ = self._run(0.265 + 1e-9)
        assert not rec.cloud_arrived and rec.w == 1.0

    def test_tie_breaks_to_lowest_index(self):
        token, _, _ = self._run(float("inf"), slm=_const_logits([1.0, 1.0, 1.0]))
        assert token == 0

    def test_slm_failure(self):
        def boom(prefix):
            raise RuntimeError("oom")
        with pytest.raises(InferenceError):
            decode_step(TimedModel(boom, 0.01), None, FusionConfig(), EventQueue(), [0])

    def test_local_only(self):
        clock = EventQueue()
        token, rec = decode_step(TimedModel(_const_logits([0.0, 3.0]), 0.065), None, FusionConfig(), clock, [0])
        assert token == 1 and rec.w == 1.0 and not rec.cloud_requested
        assert rec.latency == pytest.approx(0.065)

    def test_latency_bounded_for_random_rtts(self):
        rng = np.random.default_rng(0)
        for delay in rng.exponential(0.3, size=300):
            _, rec, _ = self._run(float(delay))
            assert rec.latency <= 0.265 + 1e-9
            if not rec.cloud_arrived:
                assert rec.w == 1.0


class TestGenerate:
    def _tables(self, seed=0):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(6, 6)) * 2, rng.normal(size=(6, 6)) * 2

    def test_hand_simulation(self):
        for seed in range(10):
            ws, wl = self._tables(seed)
            cfg = FusionConfig()
            cloud = SimulatedCloudChannel(_bigram(wl), lambda: 0.0)
            gen = generate([1], TimedModel(_bigram(ws), 0.01), cloud, cfg, max_tokens=12)
            prev, want = 1, []
            for _ in range(12):
                p, q = softmax(ws[:, prev]), softmax(wl[:, prev])
                prev = int(np.argmax(fuse(p, q, fusion_weight(p, q, cfg))))
                want.append(prev)
            assert gen.tokens == want
            assert cloud.calls == 12 and len(gen.trace) == 12

    def test_max_tokens_one(self):
        ws, _ = self._tables()
        gen = generate([0], TimedModel(_bigram(ws), 0.01), None, FusionConfig(), max_tokens=1)
        assert len(gen.tokens) == 1

    def test_stop_token_first(self):
        gen = generate([0], TimedModel(_const_logits([0, 0, 5.0]), 0.01), None, FusionConfig(),
                       max_tokens=10, stop_token=2)
        assert gen.tokens == [2]

    def test_bad_max_tokens(self):
        with pytest.raises(ValueError):
            generate([0], TimedModel(_const_logits([1.0]), 0.01), None, FusionConfig(), max_tokens=0)

    def test_constant_weight_histogram(self):
        # constant inputs: mean recorded w equals the closed form
        p_logits = np.log(np.eye(V)[0] * (1 - 1e-12) + 1e-12 / V)
        cloud = SimulatedCloudChannel(_const_logits(np.zeros(V)), lambda: 0.0)
        gen = generate([0], TimedModel(_const_logits(p_logits), 0.01), cloud, FusionConfig(), max_tokens=20)
        p = softmax(p_logits)
        want = fusion_weight(p, np.full(V, 1 / V), FusionConfig())
        assert np.mean([r.w for r in gen.trace.records]) == pytest.approx(want, abs=1e-12)

    def test_fallback_rate_monotone_in_rtt(self):
        rates = []
        for mean in (0.05, 0.1, 0.2, 0.4, 0.8):
            rng = np.random.default_rng(7)
            cloud = SimulatedCloudChannel(_const_logits(np.zeros(4)), lambda: float(rng.exponential(mean)))
            gen = generate([0], TimedModel(_const_logits(np.arange(4.0)), 0.065), cloud, FusionConfig(),
                           max_tokens=400)
            rates.append(gen.trace.fallback_count / len(gen.trace))
        assert rates == sorted(rates)

    def test_trace_jsonl(self):
        gen = generate([0], TimedModel(_const_logits([0, 1.0]), 0.01), None, FusionConfig(), max_tokens=3)
        lines = gen.trace.to_jsonl({"prompt_id": 4}).splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[1])
        assert rec["prompt_id"] == 4 and rec["step"] == 1 and rec["w"] == 1.0


class TestFrames:
    def test_roundtrip(self):
        logits = np.array([0.5, -1.25, 3.0], dtype=np.float32)
        toks, back = decode_frame(encode_frame([1, 2, 70000], logits))
        assert toks == [1, 2, 70000]
        np.testing.assert_array_equal(back, logits.astype(np.float64))

    def test_layout(self):
        frame = encode_frame([7], [1.0])
        assert frame == (b"\x0c\x00\x00\x00" b"\x01\x00\x00\x00" b"\x07\x00\x00\x00" + np.float32(1.0).tobytes())

    def test_truncated(self):
        with pytest.raises(FormatError):
            decode_frame(encode_frame([1, 2], [1.0])[:-1])

    def test_loopback_matches_simulated(self):
        rng = np.random.default_rng(3)
        ws, wl = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        # float32 wire precision: make the table exactly representable
        wl = wl.astype(np.float32).astype(np.float64)
        slm = TimedModel(_bigram(ws), 0.02)
        sim = SimulatedCloudChannel(_bigram(wl), lambda: 0.005)
        with LoopbackCloudChannel(_bigram(wl), lambda: 0.005) as loop:
            a = generate([0], slm, sim, FusionConfig(), max_tokens=8)
            b = generate([0], slm, loop, FusionConfig(), max_tokens=8)
            assert loop.calls == 8
        assert a.tokens == b.tokens
        assert [r.w for r in a.trace.records] == pytest.approx([r.w for r in b.trace.records], abs=1e-12)
