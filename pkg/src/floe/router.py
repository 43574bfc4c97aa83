"""Parameter-free prompt-wise mixture of LoRA experts.

Each expert carries a fixed embedding, the normalized mean embedding of a
few public samples of its domain. A prompt is gated once: cosine similarity
to every expert, softmax, and every expert contributes ``w_j * B_j A_j x``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import lora
from .errors import DegenerateVector, EmptyInput, ShapeMismatch, UnknownDomain
from .lora import LoraAdapter
from .numerics import as_matrix, as_vector, softmax

DEFAULT_SAMPLES_PER_EXPERT = 16

Embedder = Callable[[str], np.ndarray]


@dataclass(frozen=True, eq=False)
class Expert:
    adapter: LoraAdapter
    gamma: np.ndarray
    domain_label: str

    def __post_init__(self):
        g = as_vector(self.gamma)
        if abs(np.linalg.norm(g) - 1.0) > 1e-9:
            raise DegenerateVector(f"expert {self.domain_label!r} embedding is not unit norm")
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)


@dataclass(frozen=True, eq=False)
class ExpertRegistry:
    experts: tuple[Expert, ...]
    base_w: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        w = as_matrix(self.base_w).copy()
        w.setflags(write=False)
        object.__setattr__(self, "base_w", w)
        object.__setattr__(self, "experts", tuple(self.experts))
        for e in self.experts:
            if (e.adapter.d, e.adapter.k) != w.shape:
                raise ShapeMismatch(f"expert {e.domain_label!r} is {e.adapter.d}x{e.adapter.k}, base is {w.shape}")
        # gammas stacked once so gating is a single mat-vec
        gam = np.array([e.gamma for e in self.experts]) if self.experts else np.zeros((0, 0))
        gam.setflags(write=False)
        object.__setattr__(self, "_gammas", gam)

    def __len__(self):
        return len(self.experts)

    @property
    def labels(self) -> list[str]:
        return [e.domain_label for e in self.experts]

    def without(self, index: int) -> "ExpertRegistry":
        return ExpertRegistry(self.experts[:index] + self.experts[index + 1:], self.base_w, self.temperature)

    def with_expert(self, expert: Expert) -> "ExpertRegistry":
        return ExpertRegistry(self.experts + (expert,), self.base_w, self.temperature)

    def similarities(self, prompt_embedding) -> np.ndarray:
        e = as_vector(prompt_embedding)
        n = np.linalg.norm(e)
        if n == 0:
            raise DegenerateVector("prompt embedding has zero norm")
        return self._gammas @ (e / n)


def embed_expert(samples: Sequence[str], embedder: Embedder) -> np.ndarray:
    """Unit-normalized mean of the sample embeddings."""
    if not samples:
        raise EmptyInput("an expert needs at least one representative sample")
    mean = np.mean([np.asarray(embedder(s), dtype=np.float64) for s in samples], axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        raise DegenerateVector("sample embeddings cancel out")
    return mean / n


def gate(prompt_embedding, registry: ExpertRegistry) -> np.ndarray:
    if not len(registry):
        raise EmptyInput("registry has no experts")
    return softmax(registry.similarities(prompt_embedding), registry.temperature)


def mixed_delta(registry: ExpertRegistry, omega) -> np.ndarray:
    """``sum_j omega_j B_j A_j`` as a dense matrix (for per-token reuse)."""
    omega = _check_omega(registry, omega)
    acc = np.zeros(registry.base_w.shape)
    for w, e in zip(omega, registry.experts):
        acc += w * e.adapter.delta_w()
    return acc


def _check_omega(registry: ExpertRegistry, omega) -> np.ndarray:
    omega = as_vector(omega)
    if omega.shape[0] != len(registry):
        raise ShapeMismatch(f"{omega.shape[0]} gate weights for {len(registry)} experts")
    if abs(omega.sum() - 1.0) > 1e-9:
        raise ValueError("gate weights must sum to 1")
    return omega


def moe_forward(x, registry: ExpertRegistry, omega) -> np.ndarray:
    """``W x + sum_j omega_j B_j (A_j x)``."""
    omega = _check_omega(registry, omega)
    x = as_vector(x)
    if x.shape[0] != registry.base_w.shape[1]:
        raise ShapeMismatch(f"x has length {x.shape[0]}, W has {registry.base_w.shape[1]} columns")
    y = registry.base_w @ x
    for w, e in zip(omega, registry.experts):
        y = y + w * (e.adapter.b @ (e.adapter.a @ x))
    return y


def top1(prompt_embedding, registry: ExpertRegistry) -> int:
    """Index of the most similar expert; ties go to the lowest index."""
    return int(np.argmax(registry.similarities(prompt_embedding)))


def routing_accuracy(labeled_prompts: Sequence[tuple[str, str]], registry: ExpertRegistry,
                     embedder: Embedder) -> float:
    if not labeled_prompts:
        raise EmptyInput("no prompts to route")
    known = set(registry.labels)
    hits = 0
    for text, label in labeled_prompts:
        if label not in known:
            raise UnknownDomain(f"label {label!r} not served by any expert")
        if registry.experts[top1(embedder(text), registry)].domain_label == label:
            hits += 1
    return hits / len(labeled_prompts)


# --- manifest -----------------------------------------------------------------


def save_registry(registry: ExpertRegistry, samples: dict[str, Sequence[str]], out_dir: str | Path,
                  base_name: str = "base_w.npy") -> Path:
    """Write expert adapters, per-expert sample files and ``registry.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / base_name, registry.base_w)
    entries = []
    for i, e in enumerate(registry.experts):
        adapter_file = f"expert_{i}.flra"
        sample_file = f"expert_{i}_samples.txt"
        lora.save(e.adapter, out_dir / adapter_file)
        (out_dir / sample_file).write_text("\n".join(samples[e.domain_label]) + "\n")
        entries.append({"adapter": adapter_file, "domain_label": e.domain_label, "samples": sample_file})
    path = out_dir / "registry.json"
    manifest = {"base_w": base_name, "temperature": registry.temperature, "experts": entries}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_registry(path: str | Path, embedder: Embedder) -> ExpertRegistry:
    """Rebuild a registry; expert embeddings are recomputed from the sample files."""
    path = Path(path)
    data = json.loads(path.read_text())
    base = np.load(path.parent / data["base_w"])
    experts = []
    for e in data["experts"]:
        samples = [s for s in (path.parent / e["samples"]).read_text().splitlines() if s.strip()]
        adapter = lora.load(path.parent / e["adapter"], task_tag=e["domain_label"])
        experts.append(Expert(adapter, embed_expert(samples, embedder), e["domain_label"]))
    return ExpertRegistry(tuple(experts), base, data.get("temperature", 1.0))
