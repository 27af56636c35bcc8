"""Measurements of the streaming/offline representation gap.

For a prefix of ``t`` speech tokens, ``s[t, t']`` is the cosine similarity
between the acoustic-encoder output at position ``t'`` when only the prefix is
encoded and the same position in a full-utterance encoding.  Prefix encodings
come from the model under study (optionally with mask padding); the
full-utterance reference comes from a fixed reference model.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .corpus import Utterance
from .model import SpeechTranslator

MIN_TOKENS = 8
MAX_TOKENS = 60
CSV_FIELDS = ("x", "mode", "mean", "count")


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na * nb
    out = np.zeros(den.shape)
    ok = den > 0
    out[ok] = (a * b).sum(-1)[ok] / den[ok]
    return out


def full_encoding(model: SpeechTranslator, utt: Utterance) -> np.ndarray:
    with no_grad():
        c = model.acoustic.conv_subsample(utt.frames)
        return model.acoustic.encode_full(c).data


def prefix_encoding(model: SpeechTranslator, c: np.ndarray, t: int, m: int = 0) -> np.ndarray:
    """Encoder rows for the first ``t`` tokens, with ``m`` mask embeddings appended when ``m > 0``."""
    with no_grad():
        if m > 0:
            return model.acoustic.encode_streaming_fai(Tensor(c[:t]), m, 1.0).data
        return model.acoustic.encode_full(Tensor(c[:t])).data


def similarity_matrix(model: SpeechTranslator, utt: Utterance, m: int = 0, reference: SpeechTranslator | None = None) -> np.ndarray:
    """Lower-triangular (T, T) matrix with ``S[t-1, t'-1] = s[t, t']`` for ``t' <= t`` (NaN above)."""
    reference = model if reference is None else reference
    full = full_encoding(reference, utt)
    c = model.speech_tokens(utt.frames)
    T = c.shape[0]
    S = np.full((T, T), np.nan)
    for t in range(1, T + 1):
        S[t - 1, :t] = _cos(prefix_encoding(model, c, t, m), full[:t])
    return S


def position_similarity(model, utt, t: int, t_prime: int, m: int = 0, reference=None) -> float:
    if not 1 <= t_prime <= t:
        raise ValueError("need 1 <= t' <= t")
    reference = model if reference is None else reference
    full = full_encoding(reference, utt)
    c = model.speech_tokens(utt.frames)
    if t > c.shape[0]:
        raise ValueError("prefix longer than the utterance")
    row = prefix_encoding(model, c, t, m)[t_prime - 1]
    return float(_cos(row, full[t_prime - 1]))


def eligible(model: SpeechTranslator, corpus: list[Utterance], lo: int = MIN_TOKENS, hi: int = MAX_TOKENS) -> list[Utterance]:
    return [u for u in corpus if lo <= model.acoustic.n_tokens(u.n_frames) <= hi]


def reverse_offset_mean(S: np.ndarray, tau: int) -> float | None:
    """Mean similarity at ``tau - 1`` positions before the newest token; None when the utterance is shorter than ``tau``."""
    T = S.shape[0]
    if T < tau:
        return None
    return float(np.mean([S[t - 1, t - tau] for t in range(tau, T + 1)]))


@dataclass
class CurvePoint:
    x: int
    mode: str
    mean: float
    count: int

    def as_row(self) -> dict:
        return {"x": self.x, "mode": self.mode, "mean": self.mean, "count": self.count}


def reverse_position_profile(matrices: list[np.ndarray], max_tau: int, mode: str) -> list[CurvePoint]:
    """Corpus curve over ``tau``: utterance means averaged over utterances with at least ``tau`` tokens."""
    out = []
    for tau in range(1, max_tau + 1):
        vals = [v for v in (reverse_offset_mean(S, tau) for S in matrices) if v is not None]
        if vals:
            out.append(CurvePoint(tau, mode, float(np.mean(vals)), len(vals)))
    return out


def per_step_stats(matrices: list[np.ndarray], mode: str) -> dict[str, list[CurvePoint]]:
    """Similarity of the first, middle and last three positions as the prefix grows."""
    groups: dict[str, dict[int, list[float]]] = {}
    for S in matrices:
        T = S.shape[0]
        for t in range(3, T + 1):
            mid = (1 + t) // 2
            picks = {
                "first": [1, 2, 3],
                "middle": [mid - 1, mid, mid + 1],
                "last": [t - 2, t - 1, t],
            }
            for name, pos in picks.items():
                for i, p in enumerate(pos):
                    groups.setdefault(f"{name}{i + 1}", {}).setdefault(t, []).append(S[t - 1, p - 1])
    return {
        name: [CurvePoint(t, mode, float(np.mean(v)), len(v)) for t, v in sorted(by_t.items())]
        for name, by_t in sorted(groups.items())
    }


def newest_token_mean(S: np.ndarray) -> float:
    return float(np.mean(np.diag(S)))


GROUP_NAMES = ("worst", "worse", "medium", "better", "best")


def degradation_groups(scores: list[float], n_groups: int = 5) -> list[list[int]]:
    """Indices split into equal groups by ascending score (worst first); the remainder joins the last group."""
    if n_groups < 1:
        raise ValueError("need at least one group")
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    size = len(order) // n_groups
    if size == 0:
        raise ValueError("fewer items than groups")
    out = [order[g * size : (g + 1) * size] for g in range(n_groups)]
    out[-1].extend(order[n_groups * size :])
    return out


def predicted_context_similarity(
    model: SpeechTranslator,
    corpus: list[Utterance],
    m: int,
    mode: str = "fai",
    n_consumed: int = 10,
) -> list[CurvePoint]:
    """Similarity of mask-position outputs to the full-utterance encoding by distance from the last consumed token.

    Offset ``o > 0`` is the ``o``-th mask after a prefix of ``t`` tokens (true
    position ``t + o``), scored only where that position exists.  Offsets
    ``o <= 0`` are consumed positions, reported for context down to
    ``1 - n_consumed``.
    """
    if m < 1:
        raise ValueError("need at least one mask")
    sums: dict[int, list[float]] = {}
    for utt in corpus:
        full = full_encoding(model, utt)
        c = model.speech_tokens(utt.frames)
        T = c.shape[0]
        for t in range(1, T):
            with no_grad():
                out = model.acoustic.encode_streaming_fai(Tensor(c[:t]), m, 0.0).data
            hi = min(t + m, T)
            sims = _cos(out[:hi], full[:hi])
            for pos in range(max(0, t - n_consumed), hi):
                sums.setdefault(pos + 1 - t, []).append(sims[pos])
    return [CurvePoint(o, mode, float(np.mean(v)), len(v)) for o, v in sorted(sums.items())]


def write_curve_csv(path: str | os.PathLike, points: list[CurvePoint]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({"x": p.x, "mode": p.mode, "mean": f"{p.mean:.10f}", "count": p.count})
    os.replace(tmp, path)


@dataclass
class GapReport:
    profiles: dict[str, list[CurvePoint]]
    matrices: dict[str, list[np.ndarray]]
    utterances: list[Utterance]

    def curve(self, mode: str) -> dict[int, float]:
        return {p.x: p.mean for p in self.profiles[mode]}


def analyze_gap(
    models: dict[str, tuple[SpeechTranslator, int]],
    corpus: list[Utterance],
    reference: SpeechTranslator,
    max_tau: int = 10,
) -> GapReport:
    """Reverse-position profiles for each named (model, masks) pair against ``reference`` full encodings."""
    utts = eligible(reference, corpus)
    profiles, matrices = {}, {}
    for mode, (model, m) in models.items():
        mats = [similarity_matrix(model, u, m, reference) for u in utts]
        matrices[mode] = mats
        profiles[mode] = reverse_position_profile(mats, max_tau, mode)
    return GapReport(profiles, matrices, utts)
