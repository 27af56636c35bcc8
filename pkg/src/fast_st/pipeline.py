"""End-to-end experiment: corpus, teacher, students, streaming sweeps, gap analysis.

Hyperparameter bundles live in :data:`PROFILES`.  ``toy`` is the desk-scale
configuration; ``paper`` is the same model with m = 50; ``smoke`` is a tiny
configuration for fast end-to-end checks.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import analyze_gap, newest_token_mean, write_curve_csv
from .corpus import CorpusConfig, Utterance, generate_splits, monotonic_level, split_by_monotonicity
from .fad import FadConfig, train_fad
from .metrics import corpus_bleu
from .model import ModelConfig, SpeechTranslator
from .streaming import StreamPolicy, SweepResult, sweep
from .training import OfflineConfig, pretrain_acoustic, train_offline

logger = logging.getLogger(__name__)

DEFAULT_K = (1, 3, 5, 7, 9, 12, 15, 20, 30)


@dataclass(frozen=True)
class Profile:
    corpus: CorpusConfig
    model: ModelConfig
    offline: OfflineConfig
    fad: FadConfig
    m: int
    k_list: tuple = DEFAULT_K
    discard_rate: float = 1.0
    chunk_frames: int = 2
    gap_max_tau: int = 20

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _toy() -> Profile:
    return Profile(
        corpus=CorpusConfig(),
        model=ModelConfig(),
        offline=OfflineConfig(),
        fad=FadConfig(m=20),
        m=20,
    )


def _paper() -> Profile:
    base = _toy()
    return dataclasses.replace(base, fad=FadConfig(m=50), m=50)


def _smoke() -> Profile:
    return Profile(
        corpus=CorpusConfig(n_utterances=50),
        model=ModelConfig(),
        offline=OfflineConfig(batch_size=16, pretrain_steps=4, stage1_epochs=2, stage2_epochs=2, warmup=10),
        fad=FadConfig(m=20, epochs=1, batch_size=16, warmup=5),
        m=20,
        k_list=(1, 3),
        gap_max_tau=4,
    )


PROFILES = {"toy": _toy, "paper": _paper, "smoke": _smoke}


def get_profile(name: str, seed: int = 0) -> Profile:
    """Profile ``name`` with ``seed`` pushed into every stochastic component."""
    try:
        p = PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return dataclasses.replace(
        p,
        corpus=dataclasses.replace(p.corpus, seed=seed),
        offline=dataclasses.replace(p.offline, seed=seed),
        fad=dataclasses.replace(p.fad, seed=seed),
    )


def n_dev_test(cfg: CorpusConfig) -> int:
    return min(200, max(cfg.n_utterances // 5, 10))


def make_splits(cfg: CorpusConfig) -> dict[str, list[Utterance]]:
    n = n_dev_test(cfg)
    return generate_splits(cfg, n_dev=n, n_test=n)


def train_teacher(profile: Profile, splits, log=None) -> tuple[SpeechTranslator, dict]:
    seed = profile.offline.seed
    model = SpeechTranslator(profile.model, seed)
    pretrain_acoustic(model, splits["train"], profile.offline, log)
    res = train_offline(model, splits["train"], splits["dev"], profile.offline, log)
    return model, {"dev_stage1": res.dev_stage1, "dev_stage2": res.dev_stage2}


def offline_bleu(model: SpeechTranslator, corpus: list[Utterance]) -> float:
    return corpus_bleu([model.translate(u.frames) for u in corpus], [u.tgt for u in corpus])


@dataclass
class ExperimentResult:
    profile: Profile
    teacher: SpeechTranslator
    students: dict[int, SpeechTranslator]
    offline_bleu: float
    sweeps: dict[str, SweepResult]
    gap: dict[str, dict[int, float]]
    newest: dict[str, list[float]]
    groups: dict[str, dict[str, dict[int, float]]]
    training: dict = field(default_factory=dict)

    def bleu(self, mode: str, k: int) -> float:
        for row in self.sweeps[mode].rows:
            if row.k == k:
                return row.report.bleu
        raise KeyError((mode, k))


def group_bleu(
    sweep_result: SweepResult, corpus: list[Utterance], groups: dict[str, list[Utterance]]
) -> dict[str, dict[int, float]]:
    """BLEU per monotonicity group and per ``k`` from an existing sweep."""
    index = {u.uid: i for i, u in enumerate(corpus)}
    out: dict[str, dict[int, float]] = {}
    for name, members in groups.items():
        out[name] = {}
        for k, sessions in sweep_result.sessions.items():
            hyps = [sessions[index[u.uid]].hyp for u in members]
            out[name][k] = corpus_bleu(hyps, [u.tgt for u in members])
    return out


GROUP_LABELS = ("easy", "medium", "hard")


def run_experiment(
    profile: Profile,
    extra_m: tuple[int, ...] = (),
    out_dir: str | os.PathLike | None = None,
    log=None,
) -> ExperimentResult:
    """Train teacher and FAD student(s), then sweep baseline / fai / fast and analyse the gap.

    ``extra_m`` trains and sweeps additional students (mode ``fast-m{m}``).
    """
    splits = make_splits(profile.corpus)
    test = splits["test"]
    teacher, training = train_teacher(profile, splits, log)
    students = {profile.m: train_fad(teacher, splits["train"], dataclasses.replace(profile.fad, m=profile.m), log)}
    for m in extra_m:
        if m not in students:
            students[m] = train_fad(teacher, splits["train"], dataclasses.replace(profile.fad, m=m), log)

    base = dict(discard_rate=profile.discard_rate, chunk_frames=profile.chunk_frames)
    sweeps = {
        "baseline": sweep(teacher, test, profile.k_list, StreamPolicy(1, profile.m, fai=False, **base), "baseline"),
        "fai": sweep(teacher, test, profile.k_list, StreamPolicy(1, profile.m, **base), "fai"),
        "fast": sweep(students[profile.m], test, profile.k_list, StreamPolicy(1, profile.m, **base), "fast"),
    }
    for m in extra_m:
        name = f"fast-m{m}"
        sweeps[name] = sweep(students[m], test, profile.k_list, StreamPolicy(1, m, **base), name)

    report = analyze_gap(
        {"baseline": (teacher, 0), "fai": (teacher, profile.m), "fast": (students[profile.m], profile.m)},
        test,
        teacher,
        profile.gap_max_tau,
    )
    gap = {mode: report.curve(mode) for mode in report.profiles}
    newest = {mode: [newest_token_mean(S) for S in mats] for mode, mats in report.matrices.items()}

    mono = dict(zip(GROUP_LABELS, split_by_monotonicity(test, len(GROUP_LABELS))))
    groups = {mode: group_bleu(sw, test, mono) for mode, sw in sweeps.items()}

    result = ExperimentResult(profile, teacher, students, offline_bleu(teacher, test), sweeps, gap, newest, groups, training)
    if out_dir is not None:
        write_outputs(result, out_dir, report)
    return result


def _write_csv(path: Path, fields, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return f"{x:.10f}"


def write_outputs(result: ExperimentResult, out_dir, report=None) -> list[Path]:
    out = Path(out_dir)
    paths = []
    rows = []
    for sw in result.sweeps.values():
        rows.extend(r.csv_row() for r in sw.rows)
    p = out / "metrics.csv"
    _write_csv(p, ["k", "m", "p", "mode", "BLEU", "AL", "AP", "DAL"], rows)
    paths.append(p)

    rows = [
        {"group": g, "mode": mode, "k": k, "BLEU": _fmt(v)}
        for mode, by_group in result.groups.items()
        for g, by_k in by_group.items()
        for k, v in sorted(by_k.items())
    ]
    p = out / "monotonicity.csv"
    _write_csv(p, ["group", "mode", "k", "BLEU"], rows)
    paths.append(p)

    p = out / "offline.csv"
    _write_csv(p, ["metric", "value"], [{"metric": "offline_bleu", "value": _fmt(result.offline_bleu)}])
    paths.append(p)

    if report is not None:
        points = [pt for mode in report.profiles for pt in report.profiles[mode]]
        p = out / "gap_profile.csv"
        write_curve_csv(p, points)
        paths.append(p)
    return paths


def monotonic_levels(corpus: list[Utterance]) -> np.ndarray:
    return np.array([monotonic_level(u.alignment) for u in corpus])
