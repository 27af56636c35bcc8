"""Corpus BLEU and the AL / AP / DAL latency metrics over delay traces."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

BLEU_EPS = 1e-9


@dataclass
class DelayTrace:
    """Elapsed source duration (ms) at the moment each target token was written."""

    source_ms: float
    delays: list[float]

    @property
    def target_len(self) -> int:
        return len(self.delays)

    def validate(self) -> None:
        prev = 0.0
        for g in self.delays:
            if not (0.0 < g <= self.source_ms + 1e-9):
                raise ValueError(f"delay {g} outside (0, {self.source_ms}]")
            if g < prev:
                raise ValueError("delays must be non-decreasing")
            prev = g


@dataclass
class MetricReport:
    bleu: float
    al_ms: float
    ap: float
    dal_ms: float
    n: int


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus-level BLEU-4 on pre-tokenised sequences, in [0, 100].

    Clipped n-gram counts are pooled over the corpus; a zero match count is
    replaced by ``1e-9`` before the geometric mean.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        return 0.0
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if (m > 0 and t > 0) else BLEU_EPS
        log_p += math.log(p) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def _rate(trace: DelayTrace) -> float:
    if trace.target_len == 0:
        raise ValueError("latency is undefined for an empty hypothesis")
    return trace.target_len / trace.source_ms


def average_lagging(trace: DelayTrace) -> float:
    """Mean lag behind an ideal simultaneous translator, up to the first token written after the full source."""
    gamma = _rate(trace)
    g = trace.delays
    cut = next((j + 1 for j, d in enumerate(g) if d >= trace.source_ms), len(g))
    return sum(g[j] - j / gamma for j in range(cut)) / cut


def average_proportion(trace: DelayTrace) -> float:
    if trace.target_len == 0:
        raise ValueError("latency is undefined for an empty hypothesis")
    return sum(trace.delays) / (trace.source_ms * trace.target_len)


def differentiable_average_lagging(trace: DelayTrace) -> float:
    """Lagging where each token is at least one ideal step behind its predecessor."""
    gamma = _rate(trace)
    step = 1.0 / gamma
    prev = -step
    total = 0.0
    for j, g in enumerate(trace.delays):
        prev = max(g, prev + step)
        total += prev - j * step
    return total / trace.target_len


def aggregate(hyps, refs, traces: Sequence[DelayTrace]) -> MetricReport:
    """Corpus BLEU and instance-averaged latencies; empty hypotheses are left out of the latency means."""
    usable = [t for t in traces if t.target_len > 0]
    if usable:
        al = sum(average_lagging(t) for t in usable) / len(usable)
        ap = sum(average_proportion(t) for t in usable) / len(usable)
        dal = sum(differentiable_average_lagging(t) for t in usable) / len(usable)
    else:
        al = ap = dal = float("nan")
    return MetricReport(corpus_bleu(hyps, refs), al, ap, dal, len(traces))
