"""Seeded synthetic speech-translation corpus with exact alignments.

Each source token owns a fixed prototype feature vector; an utterance renders
every token as a run of noisy copies of its prototype.  The target side is a
bijective lexical mapping of the source tokens, followed by adjacent-pair
swaps.  A swap is triggered by the left token of the pair: a seeded subset of
the source vocabulary (a fraction ``swap_prob`` of it) are "swap-triggering"
tokens, so reordering is frequent at rate ``swap_prob`` yet still learnable
from the source content.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FRAME_MS = 20.0


@dataclass(frozen=True)
class CorpusConfig:
    src_vocab: int = 64
    tgt_vocab: int = 64
    n_utterances: int = 2000
    min_tokens: int = 6
    max_tokens: int = 16
    min_frames_per_token: int = 4
    max_frames_per_token: int = 10
    d_in: int = 16
    noise_std: float = 0.4
    swap_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise ValueError("token range must be nonempty and positive")
        if not (1 <= self.min_frames_per_token <= self.max_frames_per_token):
            raise ValueError("frames-per-token range must be nonempty and positive")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ValueError("swap_prob must lie in [0, 1]")
        if self.src_vocab < 1 or self.tgt_vocab < self.src_vocab:
            raise ValueError("target vocabulary must be at least as large as the source vocabulary")


@dataclass
class Utterance:
    uid: int
    frames: np.ndarray
    src: list[int]
    tgt: list[int]
    alignment: list[tuple[int, int]]
    frame_spans: list[tuple[int, int]]
    monotonic: float = field(default=0.0)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration_ms(self) -> float:
        return self.n_frames * FRAME_MS

    def to_json(self) -> dict:
        return {
            "id": self.uid,
            "frames": self.frames.tolist(),
            "src": list(self.src),
            "tgt": list(self.tgt),
            "alignment": [list(p) for p in self.alignment],
            "frame_spans": [list(s) for s in self.frame_spans],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        alignment = [tuple(p) for p in obj["alignment"]]
        return cls(
            uid=int(obj["id"]),
            frames=np.asarray(obj["frames"], dtype=np.float64),
            src=[int(t) for t in obj["src"]],
            tgt=[int(t) for t in obj["tgt"]],
            alignment=alignment,
            frame_spans=[tuple(s) for s in obj["frame_spans"]],
            monotonic=monotonic_level(alignment),
        )


@dataclass(frozen=True)
class Lexicon:
    prototypes: np.ndarray  # (src_vocab, d_in)
    mapping: np.ndarray  # src id -> tgt id
    triggers: np.ndarray  # bool per src id: swap with the following token

    def inverse(self) -> dict[int, int]:
        return {int(t): s for s, t in enumerate(self.mapping)}


def build_lexicon(cfg: CorpusConfig) -> Lexicon:
    rng = np.random.default_rng([cfg.seed, 0])
    prototypes = rng.normal(0.0, 1.0, size=(cfg.src_vocab, cfg.d_in))
    mapping = rng.permutation(cfg.tgt_vocab)[: cfg.src_vocab]
    order = rng.permutation(cfg.src_vocab)
    n_trig = int(round(cfg.swap_prob * cfg.src_vocab))
    triggers = np.zeros(cfg.src_vocab, dtype=bool)
    # nested sets: raising swap_prob only adds triggers
    triggers[order[:n_trig]] = True
    return Lexicon(prototypes, mapping, triggers)


def translate_tokens(src: list[int], lex: Lexicon) -> tuple[list[int], list[tuple[int, int]]]:
    """Map tokens lexically and apply trigger swaps; returns target and 1-based alignment."""
    J = len(src)
    order = list(range(J))
    i = 0
    while i < J - 1:
        if lex.triggers[src[i]]:
            order[i], order[i + 1] = order[i + 1], order[i]
            i += 2
        else:
            i += 1
    tgt = [int(lex.mapping[src[o]]) for o in order]
    alignment = sorted((o + 1, j + 1) for j, o in enumerate(order))
    return tgt, alignment


def _generate(cfg: CorpusConfig, lex: Lexicon, n: int, stream: int, uid0: int = 0) -> list[Utterance]:
    rng = np.random.default_rng([cfg.seed, stream])
    out = []
    for u in range(n):
        J = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        src = [int(t) for t in rng.integers(0, cfg.src_vocab, size=J)]
        lens = rng.integers(cfg.min_frames_per_token, cfg.max_frames_per_token + 1, size=J)
        blocks, spans, pos = [], [], 0
        for tok, k in zip(src, lens):
            k = int(k)
            blocks.append(lex.prototypes[tok][None, :] + rng.normal(0.0, cfg.noise_std, size=(k, cfg.d_in)))
            spans.append((pos, pos + k))
            pos += k
        tgt, alignment = translate_tokens(src, lex)
        out.append(
            Utterance(
                uid=uid0 + u,
                frames=np.concatenate(blocks, axis=0),
                src=src,
                tgt=tgt,
                alignment=alignment,
                frame_spans=spans,
                monotonic=monotonic_level(alignment),
            )
        )
    return out


def generate_corpus(cfg: CorpusConfig) -> list[Utterance]:
    """``cfg.n_utterances`` utterances; identical (cfg) gives a bit-identical corpus."""
    return _generate(cfg, build_lexicon(cfg), cfg.n_utterances, stream=1)


def generate_splits(cfg: CorpusConfig, n_dev: int = 200, n_test: int = 200) -> dict[str, list[Utterance]]:
    """Train/dev/test sharing one lexicon; train equals :func:`generate_corpus` output."""
    lex = build_lexicon(cfg)
    return {
        "train": _generate(cfg, lex, cfg.n_utterances, stream=1),
        "dev": _generate(cfg, lex, n_dev, stream=2, uid0=1_000_000),
        "test": _generate(cfg, lex, n_test, stream=3, uid0=2_000_000),
    }


def monotonic_level(alignment) -> float:
    """Mean positive source-minus-target index shift over aligned pairs."""
    pairs = list(alignment)
    if not pairs:
        raise ValueError("monotonic level of an empty alignment is undefined")
    return sum(max(0, i - j) for i, j in pairs) / len(pairs)


def split_by_monotonicity(corpus: list[Utterance], n_groups: int = 3) -> list[list[Utterance]]:
    """Sort by monotonic level (ties by id) and cut into equal groups, remainder to the last."""
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    ranked = sorted(corpus, key=lambda u: (monotonic_level(u.alignment), u.uid))
    size = len(ranked) // n_groups
    groups = [ranked[g * size : (g + 1) * size] for g in range(n_groups - 1)]
    groups.append(ranked[(n_groups - 1) * size :])
    return groups


def expected_total_frames(cfg: CorpusConfig) -> float:
    mean_tokens = (cfg.min_tokens + cfg.max_tokens) / 2.0
    mean_frames = (cfg.min_frames_per_token + cfg.max_frames_per_token) / 2.0
    return cfg.n_utterances * mean_tokens * mean_frames


def write_jsonl(path: str | os.PathLike, corpus: list[Utterance]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for utt in corpus:
            fh.write(json.dumps(utt.to_json(), separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str | os.PathLike) -> list[Utterance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Utterance.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed utterance ({exc})") from exc
    return out


def config_to_dict(cfg: CorpusConfig) -> dict:
    return asdict(cfg)
