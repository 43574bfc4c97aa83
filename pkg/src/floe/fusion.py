"""Token-level fusion of local (SLM) and cloud (LLM) next-token distributions.

Each decoding step races the local forward pass against a cloud round trip.
The timer starts when the local distribution is ready: if the cloud reply
lands within ``tau_wait`` of that instant the two distributions are mixed,
otherwise the step emits the local argmax with weight forced to 1.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import (
    FormatError,
    InferenceError,
    InvalidDistribution,
    InvalidWeight,
    VocabMismatch,
)
from .events import EventQueue, to_ns, to_s
from .numerics import softmax

WEIGHT_MODES = ("mlp", "entropy_heuristic")


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True, eq=False)
class MlpWeights:
    """Two-layer gate: tanh hidden layer, scalar output."""

    w1: np.ndarray  # hidden x 2|V|
    b1: np.ndarray  # hidden
    w2: np.ndarray  # hidden
    b2: float = 0.0

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int = 32) -> "MlpWeights":
        return cls(np.zeros((hidden, 2 * vocab_size)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @classmethod
    def load(cls, path: str | Path) -> "MlpWeights":
        with np.load(path) as z:
            return cls(z["w1"], z["b1"], z["w2"], float(z["b2"]))

    def save(self, path: str | Path) -> None:
        np.savez(path, w1=self.w1, b1=self.b1, w2=self.w2, b2=np.float64(self.b2))

    def logit(self, x: np.ndarray) -> float:
        if x.shape[0] != self.w1.shape[1]:
            raise VocabMismatch(f"gate expects {self.w1.shape[1]} inputs, got {x.shape[0]}")
        return float(self.w2 @ np.tanh(self.w1 @ x + self.b1) + self.b2)


@dataclass(frozen=True)
class FusionConfig:
    tau_wait: float = 0.200
    weight_mode: str = "entropy_heuristic"
    heuristic_a: float = 1.0
    heuristic_b: float = 0.0
    mlp: MlpWeights | None = None

    def __post_init__(self):
        if not self.tau_wait > 0:
            raise ValueError("tau_wait must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.weight_mode == "mlp" and self.mlp is None:
            raise ValueError("mlp weight mode needs weights")


def _check_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidDistribution(f"{name} is not a probability vector")
    return p


def fusion_weight(p_slm, p_llm, config: FusionConfig) -> float:
    p_slm = np.asarray(p_slm, dtype=np.float64)
    p_llm = np.asarray(p_llm, dtype=np.float64)
    if p_slm.shape != p_llm.shape:
        raise VocabMismatch(f"vocabulary sizes differ: {p_slm.shape} vs {p_llm.shape}")
    p_slm = _check_distribution(p_slm, "p_slm")
    p_llm = _check_distribution(p_llm, "p_llm")
    if config.weight_mode == "mlp":
        return sigmoid(config.mlp.logit(np.concatenate([p_slm, p_llm])))
    # a confident local model (lower entropy) earns a higher weight
    return sigmoid(config.heuristic_a * (entropy(p_llm) - entropy(p_slm)) + config.heuristic_b)


def fuse(p_slm, p_llm, w: float) -> np.ndarray:
    """``w * p_slm + (1 - w) * p_llm``."""
    if not 0.0 <= w <= 1.0:
        raise InvalidWeight(f"fusion weight {w} outside [0, 1]")
    p_slm = _check_distribution(p_slm, "p_slm")
    p_llm = _check_distribution(p_llm, "p_llm")
    if p_slm.shape != p_llm.shape:
        raise VocabMismatch("vocabulary sizes differ")
    if w == 1.0:
        return p_slm.copy()
    if w == 0.0:
        return p_llm.copy()
    return w * p_slm + (1.0 - w) * p_llm


# --- models and channels ------------------------------------------------------


@dataclass(frozen=True)
class TimedModel:
    """Next-token logit function plus its simulated compute time."""

    logits: Callable[[Sequence[int]], np.ndarray]
    compute_time: float


@dataclass(frozen=True)
class CloudResponse:
    logits: np.ndarray | None
    delay: float  # seconds from request to arrival; inf = never


class CloudChannel(Protocol):
    calls: int

    def request(self, prefix: Sequence[int], metadata: dict | None = None) -> CloudResponse: ...


class SimulatedCloudChannel:
    """In-process cloud: logits from ``llm`` after ``rtt() + compute_time``."""

    def __init__(self, llm: Callable[[Sequence[int]], np.ndarray], rtt: Callable[[], float],
                 compute_time: float = 0.0):
        self.llm = llm
        self.rtt = rtt
        self.compute_time = compute_time
        self.calls = 0

    def request(self, prefix, metadata=None) -> CloudResponse:
        self.calls += 1
        delay = self.rtt() + self.compute_time
        if np.isinf(delay):
            return CloudResponse(None, float("inf"))
        return CloudResponse(np.asarray(self.llm(list(prefix)), dtype=np.float64), delay)


# wire frames: u32 length | u32 n_tokens | n_tokens * u32 | |V| * f32 (all little-endian)

def encode_frame(tokens: Sequence[int], logits: Sequence[float] = ()) -> bytes:
    toks = np.asarray(tokens, dtype="<u4")
    vals = np.asarray(logits, dtype="<f4")
    payload = struct.pack("<I", toks.size) + toks.tobytes() + vals.tobytes()
    return struct.pack("<I", len(payload)) + payload


def decode_payload(payload: bytes) -> tuple[list[int], np.ndarray]:
    if len(payload) < 4:
        raise FormatError("frame payload too short")
    (n,) = struct.unpack_from("<I", payload)
    rest = len(payload) - 4 - 4 * n
    if rest < 0 or rest % 4:
        raise FormatError("frame payload length inconsistent with token count")
    toks = np.frombuffer(payload, dtype="<u4", count=n, offset=4).tolist()
    logits = np.frombuffer(payload, dtype="<f4", offset=4 + 4 * n).astype(np.float64)
    return toks, logits


def decode_frame(frame: bytes) -> tuple[list[int], np.ndarray]:
    if len(frame) < 4:
        raise FormatError("frame too short")
    (length,) = struct.unpack_from("<I", frame)
    if len(frame) != 4 + length:
        raise FormatError(f"frame declares {length} payload bytes, has {len(frame) - 4}")
    return decode_payload(frame[4:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[list[int], np.ndarray]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    return decode_payload(_recv_exact(sock, length))


class LoopbackCloudChannel:
    """Cloud stub behind a real TCP socket on 127.0.0.1.

    Requests carry the token prefix; replies carry the prefix back plus the
    logits. Arrival time is still simulated via ``rtt`` so runs stay
    deterministic.
    """

    def __init__(self, llm: Callable[[Sequence[int]], np.ndarray], rtt: Callable[[], float],
                 compute_time: float = 0.0):
        self.rtt = rtt
        self.compute_time = compute_time
        self.calls = 0

        class Handler(socketserver.BaseRequestHandler):
            def handle(self_inner):
                sock = self_inner.request
                while True:
                    try:
                        toks, _ = read_frame(sock)
                    except ConnectionError:
                        return
                    sock.sendall(encode_frame(toks, llm(toks)))

        self._server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self._sock = socket.create_connection(self._server.server_address)

    def request(self, prefix, metadata=None) -> CloudResponse:
        self.calls += 1
        delay = self.rtt() + self.compute_time
        self._sock.sendall(encode_frame(list(prefix)))
        _, logits = read_frame(self._sock)
        if np.isinf(delay):
            return CloudResponse(None, float("inf"))
        return CloudResponse(logits, delay)

    def close(self) -> None:
        self._sock.close()
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- decoding -----------------------------------------------------------------


@dataclass
class TokenRecord:
    step: int
    token: int
    w: float
    cloud_requested: bool
    cloud_arrived: bool
    wait: float  # seconds spent after local logits were ready
    latency: float  # seconds for the whole step
    start: float


@dataclass
class DecodeTrace:
    records: list[TokenRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def cloud_calls(self) -> int:
        return sum(r.cloud_requested for r in self.records)

    @property
    def fallback_count(self) -> int:
        return sum(r.cloud_requested and not r.cloud_arrived for r in self.records)

    def to_jsonl(self, extra: dict | None = None) -> str:
        lines = []
        for r in self.records:
            rec = asdict(r)
            if extra:
                rec = {**extra, **rec}
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def decode_step(slm: TimedModel, cloud: CloudChannel | None, config: FusionConfig,
                clock: EventQueue, prefix: Sequence[int], step: int = 0,
                metadata: dict | None = None) -> tuple[int, TokenRecord]:
    """One token. ``cloud=None`` means the prompt must stay on device."""
    start_ns = clock.now_ns
    q = EventQueue(start_ns)
    try:
        slm_logits = np.asarray(slm.logits(list(prefix)), dtype=np.float64)
    except Exception as exc:
        raise InferenceError(f"local model failed at step {step}: {exc}") from exc
    cloud_logits = None
    if cloud is not None:
        resp = cloud.request(prefix, metadata)
        # scheduled before the timeout so an exact tie counts as on time
        if resp.logits is not None:
            q.schedule_in(resp.delay, "cloud", resp.logits)
    q.schedule_in(slm.compute_time, "slm")

    slm_ready_ns = None
    arrived = False
    end_ns = None
    while end_ns is None:
        ev = q.pop()
        if ev.kind == "slm":
            slm_ready_ns = ev.time_ns
            if cloud is None or arrived:
                end_ns = ev.time_ns
            else:
                q.schedule_in(config.tau_wait, "timeout")
        elif ev.kind == "cloud":
            arrived = True
            cloud_logits = ev.payload
            if slm_ready_ns is not None:
                end_ns = ev.time_ns
        elif ev.kind == "timeout":
            end_ns = ev.time_ns

    p_slm = softmax(slm_logits)
    if arrived:
        p_llm = softmax(cloud_logits)
        w = fusion_weight(p_slm, p_llm, config)
        p_out = fuse(p_slm, p_llm, w)
    else:
        w = 1.0
        p_out = p_slm
    token = int(np.argmax(p_out))
    clock.advance_to(end_ns)
    record = TokenRecord(
        step=step, token=token, w=float(w),
        cloud_requested=cloud is not None, cloud_arrived=arrived,
        wait=to_s(end_ns - slm_ready_ns), latency=to_s(end_ns - start_ns), start=to_s(start_ns),
    )
    return token, record


@dataclass
class Generation:
    tokens: list[int]
    trace: DecodeTrace


def generate(prompt: Sequence[int], slm: TimedModel, cloud: CloudChannel | None, config: FusionConfig,
             max_tokens: int, stop_token: int | None = None, clock: EventQueue | None = None,
             metadata: dict | None = None) -> Generation:
    """Greedy decoding until ``stop_token`` (kept in the output) or ``max_tokens``."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    clock = clock or EventQueue()
    seq = list(prompt)
    out: list[int] = []
    trace = DecodeTrace()
    for step in range(max_tokens):
        token, rec = decode_step(slm, cloud, config, clock, seq, step, metadata)
        trace.records.append(rec)
        out.append(token)
        seq.append(token)
        if stop_token is not None and token == stop_token:
            break
    return Generation(out, trace)
