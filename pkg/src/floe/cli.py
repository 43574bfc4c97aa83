"""``floe`` command-line front end.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .aggregation import write_cluster_manifest
from .config import (
    convergence_params,
    fusion_config,
    load_config,
    resolve_path,
    section,
    sim_config,
    sweep_params,
)
from .errors import ConfigError, DegenerateVector, FloeError
from .fusion import SimulatedCloudChannel, TimedModel, generate
from .privacy import HashEmbedder, PrivacyDetector, evaluate_corpus, read_corpus, tokenize
from .rng import derive
from .router import Expert, ExpertRegistry, embed_expert, gate, load_registry, mixed_delta, save_registry
from .sim.convergence import convergence_probe
from .sim.fleet import RttModel, build_fleet, comms_report, energy_report, run_fleet
from .sim.sweep import latency_sweep
from .sim.toy import ToyLM
from .synthetic import ROUTING_VOCAB, domain_samples, privacy_corpus

log = logging.getLogger("floe")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    out: str
    version: str
    started: str
    finished: str = ""


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# --- commands -----------------------------------------------------------------


def cmd_finetune(cfg: dict, seed: int, out: Path) -> None:
    sc = sim_config(cfg, seed)
    mode = cfg.get("mode", "sync")
    fleet = build_fleet(sc)
    run = run_fleet(sc, mode, fleet)
    write_atomic(out / "rounds.jsonl", "".join(r.to_json() + "\n" for r in run.reports))

    profiles = {c.client_id: c.profile for c in fleet.clients}
    rows, comm_rows = [], []
    for rep in run.reports:
        energy = energy_report(rep, profiles)
        for cid in sorted(energy):
            rec = rep.clients.get(cid)
            rows.append({"round": rep.round, "client": cid, "participated": int(rec is not None),
                         "rank": rec.rank if rec else 0, "load": rec.load if rec else "",
                         "latency_s": rec.latency if rec else 0.0,
                         "bytes_up": rec.bytes_up if rec else 0, "bytes_down": rec.bytes_down if rec else 0,
                         "energy_j": energy[cid]})
        for c in comms_report(rep, sc.model_dim, sc.model_dim, sc.bandwidth):
            comm_rows.append({"round": rep.round, **asdict(c)})
    write_atomic(out / "clients.csv", _csv(rows, ["round", "client", "participated", "rank", "load", "latency_s",
                                                  "bytes_up", "bytes_down", "energy_j"]))
    write_atomic(out / "comms.csv", _csv(comm_rows, ["round", "client_id", "rank", "bytes_up", "bytes_down",
                                                     "transfer_time", "full_transfer_time", "reduction"]))
    if run.async_events:
        write_atomic(out / "async_events.jsonl", _jsonl(
            {"time": e.time, "cluster_id": e.cluster_id, "client_id": e.client_id, "rank": e.theta.rank}
            for e in run.async_events))

    clusters = [c for c in run.state.clusters if c.theta is not None]
    if clusters:
        write_cluster_manifest(clusters, out / "clusters")
        _write_registry(clusters, fleet, run.state.base.w, seed, out / "registry")
    last = run.reports[-1]
    summary = {
        "mode": mode,
        "rounds": len(run.reports),
        "participants_last_round": len(last.participants),
        "participants_per_round": [len(r.participants) for r in run.reports],
        "n_clusters": len(clusters),
        "perplexity_per_domain": run.perplexity,
        "wall_time_s": [r.wall_time for r in run.reports],
    }
    write_atomic(out / "summary.json", _json(summary))
    log.info("finetune: %d rounds, %d clusters, perplexity %s", len(run.reports), len(clusters),
             ["%.3f" % p for p in run.perplexity])


def _write_registry(clusters, fleet, base_w, seed: int, out: Path) -> None:
    names = list(ROUTING_VOCAB)
    if fleet.config.n_domains > len(names):
        log.warning("more domains than sample vocabularies; registry not written")
        return
    domain_of = {c.client_id: c.domain for c in fleet.clients}
    emb = HashEmbedder()
    experts, samples = [], {}
    for cm in clusters:
        majority = Counter(domain_of[m] for m in cm.member_ids).most_common(1)[0][0]
        label = names[majority]
        samples.setdefault(label, domain_samples(label, 16, seed))
        experts.append(Expert(cm.theta.with_tag(label), embed_expert(samples[label], emb), label))
    save_registry(ExpertRegistry(tuple(experts), base_w), samples, out)


def _prompt_tokens(prompt: str, vocab: int) -> list[int]:
    toks = [derive(0, "tok", t).integers(vocab) for t in tokenize(prompt)]
    return [int(t) for t in toks] or [0]


def cmd_infer(cfg: dict, seed: int, out: Path) -> None:
    inf = section(cfg, "infer")
    reg_path = resolve_path(cfg, inf.get("registry"))
    if reg_path is None or not reg_path.exists():
        raise ConfigError(f"registry not found: {reg_path}")
    prompts_path = resolve_path(cfg, inf.get("prompts"))
    if prompts_path is None:
        raise ConfigError("infer.prompts is required")
    prompts = [ln.strip() for ln in prompts_path.read_text().splitlines() if ln.strip()]
    if not prompts:
        raise ConfigError("prompt file is empty")
    emb = HashEmbedder()
    registry = load_registry(reg_path, emb)
    detector = _detector(cfg)
    fc = fusion_config(cfg)
    try:
        rtt = RttModel(**inf.get("rtt", {"kind": "constant", "a": 0.0}))
    except TypeError as exc:
        raise ConfigError(f"infer.rtt: {exc}") from None
    max_tokens = int(inf.get("max_tokens", 8))
    t_slm, t_cloud = float(inf.get("t_slm", 0.065)), float(inf.get("t_cloud", 0.010))
    base = registry.base_w
    vocab = base.shape[0]
    llm = ToyLM(base + derive(seed, "cloud-llm").normal(scale=0.5, size=base.shape))

    traces, rows = [], []
    for i, prompt in enumerate(prompts):
        verdict = detector(prompt)
        try:
            omega = gate(emb(prompt), registry)
        except DegenerateVector:
            omega = np.full(len(registry), 1.0 / len(registry))
        expert = registry.labels[int(np.argmax(omega))]
        slm = ToyLM(base + mixed_delta(registry, omega))
        cloud = None
        if not verdict.flag:
            cloud = SimulatedCloudChannel(llm.logits, rtt.sampler(derive(seed, "rtt", i)), t_cloud)
        gen = generate(_prompt_tokens(prompt, vocab), TimedModel(slm.logits, t_slm), cloud, fc, max_tokens)
        calls = cloud.calls if cloud is not None else 0
        traces.append(gen.trace.to_jsonl({"prompt_id": i, "stage": verdict.stage}))
        rows.append({"prompt_id": i, "stage": verdict.stage, "reason": verdict.reason or "",
                     "expert": expert, "cloud_calls": calls, "fused_tokens": sum(r.cloud_arrived for r in gen.trace.records),
                     "tokens": " ".join(map(str, gen.tokens))})
    stages = Counter(r["stage"] for r in rows)
    write_atomic(out / "trace.jsonl", "".join(traces))
    write_atomic(out / "prompts.csv", _csv(rows, ["prompt_id", "stage", "reason", "expert", "cloud_calls",
                                                  "fused_tokens", "tokens"]))
    summary = {
        "prompts": len(rows),
        "stages": {s: stages.get(s, 0) for s in ("rule", "semantic", "clear")},
        "routing_fraction": (stages["rule"] + stages["semantic"]) / len(rows),
        "cloud_calls": sum(r["cloud_calls"] for r in rows),
    }
    write_atomic(out / "summary.json", _json(summary))
    log.info("infer: %d prompts, %d kept on device", len(rows), stages["rule"] + stages["semantic"])


def _detector(cfg: dict) -> PrivacyDetector:
    p = section(cfg, "privacy")
    return PrivacyDetector.from_config(resolve_path(cfg, p.get("config")), tau=p.get("tau"))


def cmd_privacy_eval(cfg: dict, seed: int, out: Path, corpus_path: Path | None = None) -> None:
    p = section(cfg, "privacy")
    corpus_path = corpus_path or resolve_path(cfg, p.get("corpus"))
    if corpus_path is not None:
        corpus = read_corpus(corpus_path)
    else:
        corpus = [(c.prompt, c.sensitive) for c in privacy_corpus(seed)]
    if not corpus:
        raise ConfigError("corpus is empty")
    detector = _detector(cfg)
    rows = []
    for i, (prompt, label) in enumerate(corpus):
        v = detector(prompt)
        rows.append({"id": i, "sensitive": int(label), "flag": int(v.flag), "stage": v.stage,
                     "reason": v.reason or "", "score": "" if v.score is None else v.score})
    metrics = evaluate_corpus(corpus, detector)
    write_atomic(out / "verdicts.csv", _csv(rows, ["id", "sensitive", "flag", "stage", "reason", "score"]))
    write_atomic(out / "summary.json", _json(metrics.as_dict()))
    log.info("privacy-eval: recall %.3f precision %.3f", metrics.recall, metrics.precision)


def cmd_latency_sweep(cfg: dict, seed: int, out: Path) -> None:
    rtts, setup = sweep_params(cfg, seed)
    points = latency_sweep(rtts, fusion_config(cfg), setup)
    rows = [asdict(p) for p in points]
    write_atomic(out / "sweep.csv", _csv(rows, ["rtt", "mean_latency", "max_latency", "fallback_rate", "tokens"]))
    cap = setup.t_slm + fusion_config(cfg).tau_wait
    summary = {
        "masking_bound": setup.masking_bound,
        "t_slm": setup.t_slm,
        "cap": cap,
        "points": len(points),
        "max_latency": max(p.max_latency for p in points),
    }
    write_atomic(out / "summary.json", _json(summary))
    log.info("latency-sweep: %d points, max %.4f s (cap %.4f s)", len(points), summary["max_latency"], cap)


def cmd_convergence_probe(cfg: dict, seed: int, out: Path) -> None:
    params = convergence_params(cfg, seed)
    res = convergence_probe(params)
    rows = [{"round": t, "grad_sq": float(g), "running_avg": float(a)}
            for t, (g, a) in enumerate(zip(res.grad_sq, res.running_avg))]
    write_atomic(out / "series.csv", _csv(rows, ["round", "grad_sq", "running_avg"]))
    summary = {
        "rounds": params.rounds,
        "rank": params.rank,
        "lr": res.lr,
        "smoothness": res.smoothness,
        "kappa_sq": res.kappa_sq,
        "delta_min": res.delta_min,
        "floor": res.floor,
        "trend": {"a": res.trend[0], "b": res.trend[1]},
        "monotone_after_burn_in": res.monotone_after(params.burn_in),
    }
    write_atomic(out / "summary.json", _json(summary))
    log.info("convergence-probe: floor %.3e after %d rounds", res.floor, params.rounds)


COMMANDS: dict[str, Callable] = {
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "privacy-eval": cmd_privacy_eval,
    "latency-sweep": cmd_latency_sweep,
    "convergence-probe": cmd_convergence_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floe", description="Federated edge/cloud LLM simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "privacy-eval", type=Path, help="scenario YAML")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--quiet", action="store_true")
        if name == "privacy-eval":
            p.add_argument("--corpus", type=Path, default=None, help="jsonl with prompt/sensitive")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    manifest = None
    try:
        cfg = load_config(args.config) if args.config else {"schema_version": 1}
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        manifest = RunManifest(args.command, str(args.config) if args.config else None, seed, str(args.out),
                               _version(), _now())
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "privacy-eval":
            cmd_privacy_eval(cfg, seed, args.out, args.corpus)
        else:
            COMMANDS[args.command](cfg, seed, args.out)
        manifest.finished = _now()
        write_atomic(args.out / "manifest.json", _json(asdict(manifest)))
    except (FloeError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
