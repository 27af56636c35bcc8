"""Wait-k streaming inference with optional future-aware mask padding.

A session alternates READ (consume one chunk of frames, re-encode the whole
prefix, recount CIF firings) and WRITE (emit one target token) following the
wait-k rule in detected acoustic units.  Emitted tokens are never retracted.
"""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .cif import integrate_fire, streaming_boundary_count
from .corpus import FRAME_MS, Utterance
from .metrics import DelayTrace, MetricReport, aggregate
from .model import EOS, N_SPECIAL, SpeechTranslator, kept_mask_rows

MODES = ("baseline", "fai", "fast")
METRIC_COLUMNS = ("BLEU", "AL", "AP", "DAL")


@dataclass(frozen=True)
class StreamPolicy:
    k: int
    m: int = 20
    discard_rate: float = 1.0
    chunk_frames: int = 2
    fai: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("wait lag k must be >= 1")
        if self.chunk_frames < 1:
            raise ValueError("chunk size must be >= 1 frame")
        if self.m < 0:
            raise ValueError("mask count must be >= 0")

    @property
    def masks(self) -> int:
        return self.m if self.fai else 0


class Action(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    DONE = "DONE"


class SessionError(RuntimeError):
    pass


@dataclass
class PrefixEncoding:
    states: np.ndarray  # encoder rows handed to CIF
    real_rows: int  # rows that belong to consumed speech
    n_units: int  # complete CIF firings


class EncodingCache:
    """Memo of prefix encodings and decoder steps for one (model, utterance, masks, p).

    Every entry is a pure function of its key, so sessions that differ only in
    ``k`` can share one cache without changing any result.
    """

    def __init__(self, model: SpeechTranslator, utterance: Utterance, masks: int, discard_rate: float):
        self.model = model
        self.utterance = utterance
        self.masks = masks
        self.discard_rate = discard_rate
        self.encodings: dict[int, PrefixEncoding] = {}
        self.memories: dict[int, np.ndarray] = {}
        self.tokens: dict[tuple, int] = {}

    def encode(self, consumed: int) -> PrefixEncoding:
        enc = self.encodings.get(consumed)
        if enc is None:
            enc = encode_prefix(self.model, self.utterance.frames[:consumed], self.masks, self.discard_rate)
            self.encodings[consumed] = enc
        return enc

    def memory(self, consumed: int, source_done: bool) -> np.ndarray:
        mem = self.memories.get(consumed)
        if mem is None:
            enc = self.encode(consumed)
            res = integrate_fire(
                enc.states,
                _alpha(self.model, enc.states),
                self.model.cfg.beta,
                mode="offline" if source_done else "streaming",
                tail_threshold=self.model.cfg.tail_threshold,
            )
            mem = self.model.memory(res.states)
            self.memories[consumed] = mem
        return mem

    def next_token(self, consumed: int, prefix: list[int], source_done: bool) -> int:
        key = (consumed, tuple(prefix))
        tok = self.tokens.get(key)
        if tok is None:
            logits = self.model.next_token_logits(self.memory(consumed, source_done), prefix)
            tok = pick_target_token(logits, self.model, allow_eos=source_done)
            self.tokens[key] = tok
        return tok


def _alpha(model: SpeechTranslator, states: np.ndarray) -> np.ndarray:
    from .autodiff import Tensor

    with no_grad():
        return model.cif(Tensor(states)).data


def encode_prefix(model: SpeechTranslator, frames: np.ndarray, masks: int, discard_rate: float) -> PrefixEncoding:
    """Speech tokens of the consumed frames, optionally followed by mask embeddings, through the acoustic encoder."""
    with no_grad():
        c = model.acoustic.conv_subsample(frames)
        tau = c.shape[0]
        if masks > 0:
            states = model.acoustic.encode_streaming_fai(c, masks, discard_rate).data
        else:
            states = model.acoustic.encode_full(c).data
    return PrefixEncoding(states, tau, streaming_boundary_count(_alpha(model, states), model.cfg.beta))


def pick_target_token(logits: np.ndarray, model: SpeechTranslator, allow_eos: bool) -> int:
    """Argmax over target-vocabulary ids (plus EOS once the source is complete)."""
    lo = N_SPECIAL + model.cfg.src_vocab
    best = lo + int(np.argmax(logits[lo:]))
    if allow_eos and logits[EOS] >= logits[best]:
        return EOS
    return best


@dataclass
class WriteRecord:
    token: int
    consumed: int
    n_units: int
    emitted_before: int
    source_done: bool
    rows_seen: int
    real_rows: int


@dataclass
class SessionResult:
    uid: int
    hyp: list[int]
    trace: DelayTrace
    truncated: bool
    writes: list[WriteRecord]
    n_reads: int


class StreamingSession:
    def __init__(self, model: SpeechTranslator, utterance: Utterance, policy: StreamPolicy, cache: EncodingCache | None = None):
        self.model = model
        self.utt = utterance
        self.policy = policy
        if cache is None:
            cache = EncodingCache(model, utterance, policy.masks, policy.discard_rate)
        elif cache.masks != policy.masks or cache.discard_rate != policy.discard_rate or cache.utterance is not utterance:
            raise ValueError("cache was built for a different utterance or mask setting")
        self.cache = cache
        self.consumed = 0
        self.n_units = 0
        self.emitted: list[int] = []
        self.delays: list[float] = []
        self.writes: list[WriteRecord] = []
        self.n_reads = 0
        self.finished = False
        self.truncated = False
        self.max_len = 2 * len(utterance.src) + 5

    @property
    def source_done(self) -> bool:
        return self.consumed >= self.utt.n_frames

    def step(self) -> tuple[Action, int | None]:
        if self.finished:
            raise SessionError("session already finished")
        if not self.source_done and self.n_units - len(self.emitted) < self.policy.k:
            self.consumed = min(self.consumed + self.policy.chunk_frames, self.utt.n_frames)
            # the subsampler needs at least one full window before it can emit a token
            if self.consumed >= self.model.acoustic.stride or self.source_done:
                self.n_units = self.cache.encode(self.consumed).n_units
            self.n_reads += 1
            return Action.READ, None
        return self._write()

    def _write(self) -> tuple[Action, int | None]:
        done = self.source_done
        enc = self.cache.encode(self.consumed)
        tok = self.cache.next_token(self.consumed, self.emitted, done)
        self.writes.append(
            WriteRecord(tok, self.consumed, self.n_units, len(self.emitted), done, enc.states.shape[0], enc.real_rows)
        )
        if tok == EOS:
            self.finished = True
            return Action.DONE, None
        self.emitted.append(tok)
        self.delays.append(self.consumed * FRAME_MS)
        if len(self.emitted) >= self.max_len:
            self.finished = True
            self.truncated = True
            return Action.DONE, tok
        return Action.WRITE, tok

    def result(self) -> SessionResult:
        lo = N_SPECIAL + self.model.cfg.src_vocab
        return SessionResult(
            uid=self.utt.uid,
            hyp=[t - lo for t in self.emitted],
            trace=DelayTrace(self.utt.duration_ms, list(self.delays)),
            truncated=self.truncated,
            writes=self.writes,
            n_reads=self.n_reads,
        )


def run_session(model: SpeechTranslator, utterance: Utterance, policy: StreamPolicy, cache: EncodingCache | None = None) -> SessionResult:
    session = StreamingSession(model, utterance, policy, cache)
    while not session.finished:
        session.step()
    return session.result()


@dataclass
class SweepRow:
    k: int
    m: int
    p: float
    mode: str
    report: MetricReport

    def as_dict(self) -> dict:
        r = self.report
        return {"k": self.k, "m": self.m, "p": self.p, "mode": self.mode, "BLEU": r.bleu, "AL": r.al_ms, "AP": r.ap, "DAL": r.dal_ms}

    def csv_row(self) -> dict:
        """Settings as given, metrics with ten fixed decimals."""
        return {k: (f"{v:.10f}" if k in METRIC_COLUMNS else v) for k, v in self.as_dict().items()}


@dataclass
class SweepResult:
    rows: list[SweepRow]
    sessions: dict[int, list[SessionResult]] = field(default_factory=dict)


def sweep(
    model: SpeechTranslator,
    corpus: list[Utterance],
    k_list,
    policy_base: StreamPolicy,
    mode: str = "fai",
) -> SweepResult:
    """Run every utterance at every ``k``; rows come back sorted by ``k``."""
    caches = {u.uid: EncodingCache(model, u, policy_base.masks, policy_base.discard_rate) for u in corpus}
    rows, sessions = [], {}
    for k in sorted(k_list):
        policy = StreamPolicy(k, policy_base.m, policy_base.discard_rate, policy_base.chunk_frames, policy_base.fai)
        results = [run_session(model, u, policy, caches[u.uid]) for u in corpus]
        report = aggregate([r.hyp for r in results], [u.tgt for u in corpus], [r.trace for r in results])
        rows.append(SweepRow(k, policy_base.m if policy_base.fai else 0, policy_base.discard_rate, mode, report))
        sessions[k] = results
    return SweepResult(rows, sessions)


def check_policy_contract(result: SessionResult, policy: StreamPolicy) -> list[str]:
    """Violations of the wait-k contract in one finished session (empty list when clean).

    Also checks that the decoder only ever saw the consumed rows plus the
    ``round((1 - p) m)`` kept mask rows, so ``p = 1`` exposes no mask rows.
    """
    problems = []
    k = policy.k
    extra = kept_mask_rows(policy.masks, policy.discard_rate)
    for w in result.writes:
        if not w.source_done and w.n_units - w.emitted_before < k:
            problems.append(f"utt {result.uid}: write with N={w.n_units}, |y|={w.emitted_before} < k={k}")
        if w.rows_seen != w.real_rows + extra:
            problems.append(f"utt {result.uid}: decoder saw {w.rows_seen} rows for {w.real_rows} consumed tokens")
    g = result.trace.delays
    if any(b < a for a, b in zip(g, g[1:])):
        problems.append(f"utt {result.uid}: delays decrease")
    if any(d <= 0 or d > result.trace.source_ms for d in g):
        problems.append(f"utt {result.uid}: delay outside (0, source]")
    return problems


def trace_record(result: SessionResult, utt: Utterance, policy: StreamPolicy, mode: str) -> dict:
    return {
        "id": result.uid,
        "src_ms": utt.duration_ms,
        "delays_ms": result.trace.delays,
        "hyp": result.hyp,
        "ref": list(utt.tgt),
        "k": policy.k,
        "m": policy.masks,
        "p": policy.discard_rate,
        "mode": mode,
    }


def write_traces(path: str | os.PathLike, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_traces(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for key in ("id", "src_ms", "delays_ms", "hyp", "ref"):
                    if key not in rec:
                        raise KeyError(key)
                if len(rec["delays_ms"]) != len(rec["hyp"]):
                    raise ValueError("delays and hypothesis lengths differ")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace line ({exc})") from exc
            out.append(rec)
    return out
