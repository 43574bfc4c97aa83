"""Deterministic fleet simulator built on toy bigram models."""

from .convergence import ConvergenceParams, ConvergenceResult, convergence_probe, fed_round, make_clients
from .fleet import (
    ClientState,
    CommsRecord,
    Fleet,
    RoundReport,
    RttModel,
    ServerState,
    SimConfig,
    TimedUpdate,
    build_fleet,
    comms_report,
    domain_perplexity,
    energy_report,
    run_async,
    run_fleet,
    run_sync_round,
)
from .sweep import SweepPoint, SweepSetup, latency_sweep, toy_pair
from .toy import ToyLM, make_domains, perplexity, sample_pairs, train_client, train_local

__all__ = [
    "ClientState", "CommsRecord", "ConvergenceParams", "ConvergenceResult", "Fleet", "RoundReport",
    "RttModel", "ServerState", "SimConfig", "SweepPoint", "SweepSetup", "TimedUpdate", "ToyLM",
    "build_fleet", "comms_report", "convergence_probe", "domain_perplexity", "energy_report",
    "fed_round", "latency_sweep", "make_clients", "make_domains", "perplexity", "run_async",
    "run_fleet", "run_sync_round", "sample_pairs", "toy_pair", "train_client", "train_local",
]
