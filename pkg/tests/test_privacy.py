import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floe.errors import ConfigError, EmptyInput
from floe.privacy import (
    DOMAINS,
    DomainCentroids,
    HashEmbedder,
    PrivacyDetector,
    PrivacyRuleSet,
    Verdict,
    detect,
    evaluate_corpus,
    load_privacy_config,
    read_corpus,
    write_corpus,
)
from floe.synthetic import privacy_corpus


class CountingEmbedder:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, text):
        self.calls += 1
        return self.inner(text)


@pytest.fixture(scope="module")
def detector():
    return PrivacyDetector.from_config()


def _orthogonal_centroids(e, tau=0.8):
    """Five unit centroids orthogonal to ``e`` (and to each other)."""
    basis = [e]
    cents = {}
    for i, name in enumerate(DOMAINS):
        v = np.zeros_like(e)
        v[i] = 1.0
        for b in basis:
            v -= (b @ v) * b
        v /= np.linalg.norm(v)
        basis.append(v)
        cents[name] = v
    return DomainCentroids(cents, tau)


class TestEmbedder:
    def test_unit_and_deterministic(self):
        emb = HashEmbedder(seed=3)
        a = emb("the quick brown fox")
        assert np.linalg.norm(a) == pytest.approx(1.0)
        np.testing.assert_array_equal(a, HashEmbedder(seed=3)("the quick brown fox"))
        assert a.shape == (256,)

    def test_seed_changes_embedding(self):
        assert not np.array_equal(HashEmbedder(seed=0)("hello there"), HashEmbedder(seed=1)("hello there"))

    def test_case_insensitive(self):
        emb = HashEmbedder()
        np.testing.assert_array_equal(emb("Hello World"), emb("hello world"))

    def test_no_tokens(self):
        assert not HashEmbedder()("!!! ???").any()


class TestDetect:
    def test_phone_rule(self, detector):
        assert tuple(detector("call me at 555-0123-4567")) == (True, "rule")

    def test_orthogonal_prompt_clear(self, detector):
        prompt = "tell me something nice"
        e = detector.embedder(prompt)
        v = detect(prompt, detector.rules, _orthogonal_centroids(e), detector.embedder)
        assert tuple(v) == (False, "clear")
        assert v.score == pytest.approx(0.0, abs=1e-12)

    def test_constructed_semantic_hit(self, detector):
        prompt = "tell me something nice"
        e = detector.embedder(prompt)
        cents = dict(_orthogonal_centroids(e).centroids)
        orth = cents["finance"]
        # cosine exactly 0.9 to the health centroid
        cents["health"] = 0.9 * e + np.sqrt(1 - 0.81) * orth
        cents["finance"] = cents["legal"] + cents["location"]
        v = detect(prompt, detector.rules, DomainCentroids(cents, tau=0.8), detector.embedder)
        assert tuple(v) == (True, "semantic")
        assert v.reason == "health" and v.score == pytest.approx(0.9, abs=1e-9)

    def test_empty_prompt(self, detector):
        with pytest.raises(EmptyInput):
            detector("")
        with pytest.raises(EmptyInput):
            detector("   ")

    def test_rule_short_circuits_embedding(self):
        counter = CountingEmbedder(HashEmbedder())
        det = PrivacyDetector.from_config(embedder=HashEmbedder())
        det = PrivacyDetector(det.rules, det.centroids, counter)
        assert det("my ssn is 123-45-6789").stage == "rule"
        assert counter.calls == 0
        det("what is the capital of peru")
        assert counter.calls == 1

    @pytest.mark.parametrize("prompt", [
        "reach me on +1 415 555 0134",
        "card 4111 1111 1111 1111",
        "4111-1111-1111-1111 is the card",
        "ssn 078-05-1120",
        "passport AB1234567",
        "mail jane.doe@example.com",
    ])
    def test_regex_patterns(self, detector, prompt):
        assert detector(prompt).stage == "rule"

    def test_lexicon_whole_tokens(self, detector):
        assert detector("My Wife is visiting").stage == "rule"
        # "son" must not match inside "reason" or "season"
        assert detector.rules.lexicon_hit("what is the reason for the season") is None
        assert detector.rules.lexicon_hit("update my home address please") == "location"

    def test_multiword_lexicon(self):
        rules = PrivacyRuleSet({}, {"finance": ["routing number"]})
        assert rules.lexicon_hit("what is my Routing Number") == "finance"
        assert rules.lexicon_hit("routing the number") is None

    def test_deterministic(self, detector):
        p = "my lawyer says the court date moved. being sued by a former landlord"
        assert detector(p) == detector(p)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_monotone_in_tau(self, t1, t2):
        lo, hi = sorted((t1, t2))
        det = PrivacyDetector.from_config()
        prompts = [p.prompt for p in privacy_corpus(1, 10, 20, 20)]
        det_lo, det_hi = det.with_tau(lo), det.with_tau(hi)
        for p in prompts:
            if not det_lo(p).flag:
                assert not det_hi(p).flag

    def test_no_false_negatives_on_exact_patterns(self, detector):
        rng = np.random.default_rng(0)
        for _ in range(300):
            digits = "".join(map(str, rng.integers(0, 10, 16)))
            card = " ".join(digits[i:i + 4] for i in range(0, 16, 4))
            assert detector(f"here it is {card} thanks").flag
            ssn = f"{digits[:3]}-{digits[3:5]}-{digits[5:9]}"
            assert detector(f"id {ssn}").flag


class TestConfig:
    def test_bundled_config_shape(self):
        cfg = load_privacy_config()
        assert set(cfg["seed_phrases"]) == set(DOMAINS)
        assert set(cfg["entity_lexicons"]) == {"health", "finance", "location", "family"}

    def test_wrong_centroid_set(self):
        with pytest.raises(ConfigError):
            DomainCentroids({"health": np.ones(3)}, 0.8)

    def test_bad_regex(self):
        with pytest.raises(ConfigError):
            PrivacyRuleSet({"x": "("}, {"a": ["b"]})

    def test_empty_lexicon(self):
        with pytest.raises(ConfigError):
            PrivacyRuleSet({}, {"a": []})

    def test_custom_file(self, tmp_path):
        cfg = load_privacy_config()
        cfg["tau"] = 0.5
        path = tmp_path / "p.yaml"
        import yaml
        path.write_text(yaml.safe_dump(cfg))
        assert PrivacyDetector.from_config(path).centroids.tau == 0.5


class TestEvaluate:
    CORPUS = [("a", True), ("b", True), ("c", False), ("d", False), ("e", False)]

    def test_flag_everything(self):
        m = evaluate_corpus(self.CORPUS, lambda p: Verdict(True, "rule"))
        assert m.recall == 1.0
        assert m.precision == pytest.approx(2 / 5)

    def test_flag_nothing(self):
        m = evaluate_corpus(self.CORPUS, lambda p: Verdict(False, "clear"))
        assert m.recall == 0.0 and m.precision == 0.0 and m.f1 == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            evaluate_corpus([], lambda p: Verdict(False, "clear"))

    def test_constructed_corpus(self, detector):
        corpus = privacy_corpus(seed=0)
        assert len(corpus) == 200
        # exact confusion matrix from the construction labels
        for item in corpus:
            assert detector(item.prompt).stage == item.expected_stage, item.prompt
        m = evaluate_corpus([(c.prompt, c.sensitive) for c in corpus], detector)
        assert (m.tp, m.fp, m.tn, m.fn) == (150, 0, 50, 0)
        assert m.recall >= 0.95
        assert m.stages == {"rule": 100, "semantic": 50, "clear": 50}

    def test_corpus_io(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_corpus(self.CORPUS, path)
        assert read_corpus(path) == self.CORPUS
        path.write_text(json.dumps({"prompt": "x", "sensitive": "yes"}) + "\n")
        with pytest.raises(ConfigError):
            read_corpus(path)
