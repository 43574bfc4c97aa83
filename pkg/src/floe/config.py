"""Scenario files: one YAML document per run with an explicit schema version.

Top-level keys (all optional except ``schema_version``)::

    schema_version: 1
    seed: 0
    mode: sync | async
    sim: {...}            # SimConfig fields; rtt: {kind, a, b}; dp: {clip_c, sigma_noise}
    fusion: {...}         # tau_wait, weight_mode, heuristic_a, heuristic_b, mlp_weights (path)
    sweep: {...}          # rtts (list; "inf" allowed), t_slm, t_cloud, sessions, max_tokens, vocab_size
    convergence: {...}    # ConvergenceParams fields
    privacy: {...}        # config (path to rules file), tau, corpus (jsonl path)
    infer: {...}          # registry (path), prompts (path), max_tokens, rtt, t_slm, t_cloud
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Any

import yaml

from .aggregation import DpParams
from .errors import ConfigError
from .fusion import FusionConfig, MlpWeights
from .sim.convergence import ConvergenceParams
from .sim.fleet import RttModel, SimConfig
from .sim.sweep import SweepSetup, toy_pair

SCHEMA_VERSION = 1
SECTIONS = {"schema_version", "seed", "mode", "sim", "fusion", "sweep", "convergence", "privacy", "infer"}


def load_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    unknown = set(data) - SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for key in SECTIONS - {"schema_version", "seed", "mode"}:
        if data.get(key) is not None and not isinstance(data[key], dict):
            raise ConfigError(f"section {key!r} must be a mapping")
    if data.get("mode", "sync") not in ("sync", "async"):
        raise ConfigError("mode must be 'sync' or 'async'")
    data["_dir"] = path.parent
    return data


def section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name) or {})


def _build(cls, fields: dict, what: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(fields) - allowed
    if unknown:
        raise ConfigError(f"{what}: unknown fields {sorted(unknown)}")
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


def resolve_path(cfg: dict, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_dir", ".")) / p


def sim_config(cfg: dict, seed: int) -> SimConfig:
    s = section(cfg, "sim")
    if "rtt" in s:
        s["rtt"] = _build(RttModel, dict(s["rtt"]), "sim.rtt")
    if s.get("dp") is not None:
        s["dp"] = _build(DpParams, dict(s["dp"]), "sim.dp")
    if "ranks" in s:
        s["ranks"] = tuple(int(r) for r in s["ranks"])
    s["seed"] = seed
    return _build(SimConfig, s, "sim")


def fusion_config(cfg: dict) -> FusionConfig:
    f = section(cfg, "fusion")
    path = f.pop("mlp_weights", None)
    if path is not None:
        try:
            f["mlp"] = MlpWeights.load(resolve_path(cfg, path))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"fusion.mlp_weights: {exc}") from None
    return _build(FusionConfig, f, "fusion")


def _as_rtt(x) -> float:
    if isinstance(x, str) and x.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(x)
    except (TypeError, ValueError):
        raise ConfigError(f"bad RTT value {x!r}") from None


def sweep_params(cfg: dict, seed: int) -> tuple[list[float], SweepSetup]:
    s = section(cfg, "sweep")
    rtts = [_as_rtt(x) for x in s.pop("rtts", [0.0, 0.05, 0.1, 0.3, 0.5, "inf"])]
    vocab = int(s.pop("vocab_size", 32))
    slm, llm = toy_pair(vocab, seed)
    return rtts, _build(SweepSetup, {"slm": slm, "llm": llm, "seed": seed, **s}, "sweep")


def convergence_params(cfg: dict, seed: int) -> ConvergenceParams:
    c = section(cfg, "convergence")
    if "eig_range" in c:
        c["eig_range"] = tuple(float(x) for x in c["eig_range"])
    c["seed"] = seed
    return _build(ConvergenceParams, c, "convergence")
