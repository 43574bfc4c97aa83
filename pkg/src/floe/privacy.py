"""Two-stage on-device privacy screen.

Stage 1 is purely lexical: regexes for numeric identifiers and whole-token
keyword lists. Only prompts that pass stage 1 are embedded; stage 2 flags a
prompt whose embedding is closer than ``tau`` (cosine) to any of five domain
centroids. A flagged prompt must stay on the device.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError, EmptyInput

DOMAINS = ("health", "finance", "legal", "location", "profile")
LEXICON_DOMAINS = ("health", "finance", "location", "family")

_TOKEN_RE = re.compile(r"[a-z0-9']+")

Embedder = Callable[[str], np.ndarray]


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class HashEmbedder:
    """Signed feature hashing of word unigrams and bigrams, l2-normalized.

    Text with no word tokens maps to the zero vector.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=False)

    def features(self, text: str) -> list[str]:
        toks = tokenize(text)
        return [f"u:{t}" for t in toks] + [f"b:{a} {b}" for a, b in zip(toks, toks[1:])]

    def _slot(self, feature: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(feature.encode(), key=self._key, digest_size=8).digest(), "little")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for f in self.features(text):
            idx, sign = self._slot(f)
            v[idx] += sign
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


@dataclass(frozen=True)
class PrivacyRuleSet:
    regex_patterns: Mapping[str, str]
    entity_lexicons: Mapping[str, Sequence[str]]
    _compiled: tuple = field(init=False, repr=False, compare=False)
    _terms: Mapping[str, frozenset] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        try:
            compiled = tuple((name, re.compile(p)) for name, p in self.regex_patterns.items())
        except re.error as exc:
            raise ConfigError(f"bad regex: {exc}") from exc
        terms = {}
        for domain, words in self.entity_lexicons.items():
            if not words:
                raise ConfigError(f"lexicon {domain!r} is empty")
            terms[domain] = frozenset(" ".join(tokenize(w)) for w in words)
        object.__setattr__(self, "_compiled", compiled)
        object.__setattr__(self, "_terms", terms)

    def regex_hit(self, prompt: str) -> str | None:
        for name, rx in self._compiled:
            if rx.search(prompt):
                return name
        return None

    def lexicon_hit(self, prompt: str) -> str | None:
        toks = tokenize(prompt)
        grams = set(toks)
        grams.update(" ".join(toks[i:i + 2]) for i in range(len(toks) - 1))
        grams.update(" ".join(toks[i:i + 3]) for i in range(len(toks) - 2))
        for domain, terms in self._terms.items():
            if grams & terms:
                return domain
        return None


@dataclass(frozen=True)
class DomainCentroids:
    centroids: Mapping[str, np.ndarray]
    tau: float = 0.8

    def __post_init__(self):
        if set(self.centroids) != set(DOMAINS):
            raise ConfigError(f"need exactly the centroids {DOMAINS}, got {sorted(self.centroids)}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must be in (0, 1)")
        fixed = {}
        for name in DOMAINS:
            v = np.asarray(self.centroids[name], dtype=np.float64)
            n = np.linalg.norm(v)
            if n == 0:
                raise ConfigError(f"centroid {name!r} is zero")
            fixed[name] = v / n
        object.__setattr__(self, "centroids", fixed)

    @classmethod
    def from_phrases(cls, phrases: Mapping[str, Sequence[str]], embedder: Embedder,
                     tau: float = 0.8) -> "DomainCentroids":
        cents = {}
        for name in DOMAINS:
            if not phrases.get(name):
                raise ConfigError(f"no seed phrases for {name!r}")
            cents[name] = np.mean([embedder(p) for p in phrases[name]], axis=0)
        return cls(cents, tau)

    def best(self, e: np.ndarray) -> tuple[str, float]:
        scores = {name: float(c @ e) for name, c in self.centroids.items()}
        name = max(DOMAINS, key=lambda n: scores[n])
        return name, scores[name]


@dataclass(frozen=True)
class Verdict:
    flag: bool
    stage: str  # "rule" | "semantic" | "clear"
    reason: str | None = None
    score: float | None = None

    def __iter__(self):
        return iter((self.flag, self.stage))


def detect(prompt: str, rules: PrivacyRuleSet, centroids: DomainCentroids, embedder: Embedder) -> Verdict:
    if not prompt or not prompt.strip():
        raise EmptyInput("empty prompt")
    hit = rules.regex_hit(prompt)
    if hit is None:
        hit = rules.lexicon_hit(prompt)
    if hit is not None:
        return Verdict(True, "rule", hit)
    e = np.asarray(embedder(prompt), dtype=np.float64)
    n = np.linalg.norm(e)
    if n == 0:
        return Verdict(False, "clear", None, 0.0)
    domain, score = centroids.best(e / n)
    if score > centroids.tau:
        return Verdict(True, "semantic", domain, score)
    return Verdict(False, "clear", None, score)


class PrivacyDetector:
    """Bundles rules, centroids and embedder; immutable after construction."""

    def __init__(self, rules: PrivacyRuleSet, centroids: DomainCentroids, embedder: Embedder):
        self.rules = rules
        self.centroids = centroids
        self.embedder = embedder

    def __call__(self, prompt: str) -> Verdict:
        return detect(prompt, self.rules, self.centroids, self.embedder)

    def with_tau(self, tau: float) -> "PrivacyDetector":
        return PrivacyDetector(self.rules, DomainCentroids(self.centroids.centroids, tau), self.embedder)

    @classmethod
    def from_config(cls, path: str | Path | None = None, *, tau: float | None = None,
                    embedder: Embedder | None = None, seed: int = 0) -> "PrivacyDetector":
        cfg = load_privacy_config(path)
        embedder = embedder or HashEmbedder(seed=seed)
        rules = PrivacyRuleSet(cfg["regex_patterns"], cfg["entity_lexicons"])
        cents = DomainCentroids.from_phrases(cfg["seed_phrases"], embedder,
                                             tau if tau is not None else cfg.get("tau", 0.8))
        return cls(rules, cents, embedder)


def load_privacy_config(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("floe").joinpath("data/privacy.yaml").read_text()
    else:
        text = Path(path).read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise ConfigError("privacy config must be a mapping")
    for key in ("regex_patterns", "entity_lexicons", "seed_phrases"):
        if key not in cfg:
            raise ConfigError(f"privacy config missing {key!r}")
    return cfg


# --- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class PrivacyMetrics:
    precision: float
    recall: float
    f1: float
    routing_fraction: float
    tp: int
    fp: int
    tn: int
    fn: int
    stages: Mapping[str, int]

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "routing_fraction": self.routing_fraction,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "stages": dict(self.stages),
        }


def evaluate_corpus(corpus: Iterable[tuple[str, bool]], detector: Callable[[str], Verdict]) -> PrivacyMetrics:
    """Confusion-matrix metrics.

    ``routing_fraction`` is the share of truly sensitive prompts that the
    detector keeps on device. Precision is 0 when nothing is flagged.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyInput("empty corpus")
    tp = fp = tn = fn = 0
    stages = {"rule": 0, "semantic": 0, "clear": 0}
    for prompt, label in corpus:
        v = detector(prompt)
        stages[v.stage] += 1
        if v.flag and label:
            tp += 1
        elif v.flag:
            fp += 1
        elif label:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    routing = tp / (tp + fn) if tp + fn else 0.0
    return PrivacyMetrics(precision, recall, f1, routing, tp, fp, tn, fn, stages)


def read_corpus(path: str | Path) -> list[tuple[str, bool]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if not isinstance(rec.get("prompt"), str) or not isinstance(rec.get("sensitive"), bool):
                raise ConfigError(f"{path}:{lineno}: need {{'prompt': str, 'sensitive': bool}}")
            out.append((rec["prompt"], rec["sensitive"]))
    return out


def write_corpus(corpus: Iterable[tuple[str, bool]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for prompt, label in corpus:
            fh.write(json.dumps({"prompt": prompt, "sensitive": label}) + "\n")
