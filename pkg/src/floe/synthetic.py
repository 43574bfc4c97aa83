"""Synthetic text corpora with known labels.

Used by the privacy and routing harnesses in place of real benchmark data.
Every generator is a pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .privacy import DOMAINS, load_privacy_config
from .rng import derive


@dataclass(frozen=True)
class LabeledPrompt:
    prompt: str
    sensitive: bool
    expected_stage: str  # "rule" | "semantic" | "clear"


def _digits(rng, n):
    return "".join(str(int(d)) for d in rng.integers(0, 10, size=n))


_RULE_TEMPLATES = (
    lambda r: f"call me at {_digits(r, 3)}-{_digits(r, 4)}-{_digits(r, 4)} after six",
    lambda r: f"my number is ({_digits(r, 3)}) {_digits(r, 3)}-{_digits(r, 4)}, text me",
    lambda r: f"charge it to {_digits(r, 4)} {_digits(r, 4)} {_digits(r, 4)} {_digits(r, 4)} please",
    lambda r: f"card {_digits(r, 4)}-{_digits(r, 4)}-{_digits(r, 4)}-{_digits(r, 4)} expires soon",
    lambda r: f"fill in the form with ssn {_digits(r, 3)}-{_digits(r, 2)}-{_digits(r, 4)}",
    lambda r: f"my passport is X{_digits(r, 8)} can you check it",
    lambda r: f"send the invoice to user{_digits(r, 3)}@example.org today",
    lambda r: f"remind me to pick up my {r.choice(['medication', 'prescription', 'insulin'])} tomorrow",
    lambda r: f"draft a note to my {r.choice(['wife', 'husband', 'daughter', 'son', 'mother'])} about the weekend",
    lambda r: f"how do i lower the interest on my {r.choice(['mortgage', 'loan', 'debt'])}",
    lambda r: f"the {r.choice(['doctor', 'hospital', 'clinic'])} wants me back next tuesday",
    lambda r: f"update my {r.choice(['home address', 'zip code', 'street'])} for deliveries",
)

_NEGATIVE_TEMPLATES = (
    lambda r: f"write a {r.choice(['python', 'rust', 'go', 'java'])} function that {r.choice(['reverses a list', 'parses a date', 'sorts words', 'merges two dicts'])}",
    lambda r: f"summarize the plot of {r.choice(['hamlet', 'moby dick', 'the odyssey', 'dune'])} in three sentences",
    lambda r: f"explain how {r.choice(['photosynthesis', 'a compiler', 'rainbows', 'vaccines in general', 'tides'])} works",
    lambda r: f"translate good morning into {r.choice(['french', 'spanish', 'german', 'japanese'])}",
    lambda r: f"give me a recipe for {r.choice(['lentil soup', 'banana bread', 'pad thai', 'pancakes'])}",
    lambda r: f"what is the capital of {r.choice(['peru', 'kenya', 'norway', 'vietnam'])}",
    lambda r: f"list five fun facts about {r.choice(['octopuses', 'saturn', 'volcanoes', 'honeybees'])}",
    lambda r: f"suggest a name for a {r.choice(['bakery', 'podcast', 'chess club', 'robot'])}",
)


def privacy_corpus(seed: int = 0, n_rule: int = 100, n_semantic: int = 50, n_negative: int = 50,
                   config_path=None) -> list[LabeledPrompt]:
    """Labeled prompts: rule-pattern positives, paraphrase positives that only
    the embedding stage can catch, and ordinary negatives.

    Semantic positives are shuffled runs of six to eight of a domain's seed
    phrases, so their embeddings sit near that domain's centroid while
    containing no stage-1 keyword.
    """
    rng = derive(seed, "privacy-corpus")
    phrases = load_privacy_config(config_path)["seed_phrases"]
    out = []
    for i in range(n_rule):
        out.append(LabeledPrompt(_RULE_TEMPLATES[i % len(_RULE_TEMPLATES)](rng), True, "rule"))
    for i in range(n_semantic):
        domain = DOMAINS[i % len(DOMAINS)]
        pool = list(phrases[domain])
        keep = int(rng.integers(len(pool) - 2, len(pool) + 1))
        chosen = [pool[j] for j in rng.permutation(len(pool))[:keep]]
        out.append(LabeledPrompt(". ".join(chosen), True, "semantic"))
    for i in range(n_negative):
        out.append(LabeledPrompt(_NEGATIVE_TEMPLATES[i % len(_NEGATIVE_TEMPLATES)](rng), False, "clear"))
    return out


# --- routing domains ----------------------------------------------------------

ROUTING_VOCAB = {
    "math": "integral derivative equation prime factor polynomial matrix theorem proof algebra "
            "geometry angle triangle fraction sum product limit series vector probability".split(),
    "medical": "patient fever dose infection vaccine nurse blood pressure symptom tablet "
               "wound heart lungs ward recovery antibiotic virus pulse rash injury".split(),
    "code": "function variable compile loop array python class method bug stack "
            "pointer thread runtime module syntax debugger library recursion git api".split(),
    "legal": "contract court lawsuit judge clause tenant liability statute appeal verdict "
             "plaintiff defendant attorney evidence ruling testimony jury lease patent".split(),
    "cooking": "recipe oven flour simmer garlic onion bake roast butter sauce "
               "pan knife dough salt pepper stew grill chop season broth".split(),
    "travel": "flight hotel passport visa luggage airport itinerary beach train ticket "
              "museum tour hostel border map cruise backpack destination journey guide".split(),
}

_FILLER = "please can you help me with the a of to and about this what how".split()


def domain_text(domain: str, rng: np.random.Generator, n_words: int = 10) -> str:
    vocab = ROUTING_VOCAB[domain]
    words = []
    for _ in range(n_words):
        pool = _FILLER if rng.random() < 0.3 else vocab
        words.append(str(pool[int(rng.integers(len(pool)))]))
    return " ".join(words)


def domain_samples(domain: str, k: int, seed: int = 0) -> list[str]:
    """Server-held representative samples for an expert's domain."""
    rng = derive(seed, "samples", domain)
    return [domain_text(domain, rng) for _ in range(k)]


def domain_prompts(domains, n_per_domain: int, seed: int = 0) -> list[tuple[str, str]]:
    """Held-out prompts drawn from the same generator as the samples."""
    out = []
    for d in domains:
        rng = derive(seed, "prompts", d)
        out.extend((domain_text(d, rng), d) for _ in range(n_per_domain))
    return out
