"""Acceptance criteria at their stated tolerances; each test records a PASS/FAIL line for the run summary."""

import filecmp
import subprocess
import sys

import numpy as np
import pytest

from conftest import EXTRA_M, VERDICTS
from fast_st.autodiff import (
    Tensor,
    bernoulli_kl,
    concat,
    cosine_rows,
    cross_entropy,
    layer_norm,
    matmul,
    maximum,
    minimum,
    softmax_rows,
    stack,
    where,
)
from fast_st.cif import cif_length_loss, contribution_matrix, integrate_fire, scale_weights
from fast_st.corpus import CorpusConfig
from fast_st.fad import FadConfig, train_fad
from fast_st.metrics import DelayTrace, average_lagging, average_proportion, differentiable_average_lagging
from fast_st.model import EOS, N_SPECIAL
from fast_st.pipeline import make_splits
from fast_st.streaming import StreamPolicy, check_policy_contract
from oracles import away_from_zero, max_grad_error, oracle_al, oracle_ap, oracle_dal, random_trace

N_INSTANCES = 20
LOW_K = (1, 3)

pytestmark = pytest.mark.slow


def record(n: int, title: str, ok: bool, detail: str = "") -> None:
    VERDICTS[n] = (title, bool(ok))
    assert ok, f"criterion {n} ({title}) failed: {detail}"


def med(values) -> float:
    return float(np.median(list(values)))


# -- 1. numeric core -----------------------------------------------------------


def _shape(rng):
    return (int(rng.integers(1, 4)), int(rng.integers(1, 5)))


def _normal(rng):
    return [rng.normal(size=_shape(rng))]


def _positive(rng):
    return [rng.uniform(0.5, 2.0, size=_shape(rng))]


def _pair(rng):
    r, c = _shape(rng)
    return [rng.normal(size=(r, c)), rng.uniform(0.5, 2.0, size=(1, c))]


def _separated_pair(rng):
    a = rng.normal(size=(3, 4))
    return [a, a + away_from_zero(rng, (3, 4), 0.2)]


def _alpha(rng):
    return [rng.uniform(0.1, 0.9, size=(1, 7))]


_TARGETS = np.random.default_rng(99).integers(0, 6, size=(2, 3))
_COND = np.random.default_rng(98).random((3, 4)) < 0.5
_R = np.random.default_rng(97).normal(size=(1, 3, 7))

GRAD_OPS = {
    "neg": (lambda a: -a, _normal),
    "exp": (lambda a: a.exp(), _normal),
    "log": (lambda a: a.log(), _positive),
    "sqrt": (lambda a: a.sqrt(), _positive),
    "pow": (lambda a: a**3, _normal),
    "tanh": (lambda a: a.tanh(), _normal),
    "sigmoid": (lambda a: a.sigmoid(), _normal),
    "gelu": (lambda a: a.gelu(), _normal),
    "relu": (lambda a: a.relu(), lambda rng: [away_from_zero(rng, _shape(rng))]),
    "abs": (lambda a: a.abs(), lambda rng: [away_from_zero(rng, _shape(rng))]),
    "softmax": (lambda a: a.softmax(axis=-1), _normal),
    "log_softmax": (lambda a: a.log_softmax(axis=-1), _normal),
    "softmax_rows": (softmax_rows, _normal),
    "sum": (lambda a: a.sum(axis=0), _normal),
    "mean": (lambda a: a.mean(axis=-1, keepdims=True), _normal),
    "cumsum": (lambda a: a.cumsum(axis=-1), _normal),
    "transpose": (lambda a: a.transpose(), _normal),
    "reshape": (lambda a: a.reshape(-1), _normal),
    "getitem": (lambda a: a[np.array([0, 0, -1])], _normal),
    "add": (lambda a, b: a + b, _pair),
    "sub": (lambda a, b: a - b, _pair),
    "mul": (lambda a, b: a * b, _pair),
    "div": (lambda a, b: a / b, _pair),
    "matmul": (matmul, lambda rng: [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
    "concat": (lambda a, b: concat([a, b], axis=0), lambda rng: [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
    "stack": (lambda a, b: stack([a, b], axis=1), lambda rng: [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
    "where": (lambda a, b: where(_COND, a, b), _separated_pair),
    "minimum": (minimum, _separated_pair),
    "maximum": (maximum, _separated_pair),
    "layer_norm": (layer_norm, lambda rng: [rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)]),
    "cosine_rows": (cosine_rows, lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "bernoulli_kl": (bernoulli_kl, lambda rng: list(rng.uniform(0.05, 0.95, size=(2, 5)))),
    "cross_entropy": (lambda x: cross_entropy(x, _TARGETS, ignore_index=0, smoothing=0.1, reduction="sum"),
                      lambda rng: [rng.normal(size=(2, 3, 6))]),
    "cif_length_loss": (lambda a: cif_length_loss(a, 4), lambda rng: [rng.uniform(0.1, 0.9, size=6)]),
    "contribution_matrix": (lambda a: contribution_matrix(scale_weights(a, [3], [7]), 3) * _R, _alpha),
}


def test_c01_numeric_core():
    worst = {}
    for name, (build, make) in GRAD_OPS.items():
        errs = []
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            errs.append(max_grad_error(build, make(rng), seed))
        worst[name] = max(errs)
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    record(1, "numeric core gradient checks", not bad, f"{bad}")


# -- 2. CIF correctness --------------------------------------------------------


def test_c02_cif_correctness():
    rng = np.random.default_rng(0)
    conservation, counts, loss_err = 0.0, True, 0.0
    for _ in range(200):
        T = int(rng.integers(2, 60))
        a = rng.normal(size=(T, 3))
        alpha = rng.uniform(0.01, 0.99, size=T)
        res = integrate_fire(a, alpha, 1.0, mode="streaming")
        used = sum(w for unit in res.contributions for _, w in unit)
        conservation = max(conservation, abs(used + res.residual - alpha.sum()))
        J = int(rng.integers(1, T + 1))
        counts &= integrate_fire(a, alpha, 1.0, scale_to=J).n_units == J
        loss_err = max(loss_err, abs(cif_length_loss(Tensor(alpha), J).item() - abs(J - alpha.sum())))
    ok = conservation <= 1e-12 and counts and loss_err <= 1e-12
    record(2, "CIF conservation, exact J firings, length loss", ok,
           f"conservation {conservation:.1e}, counts {counts}, loss {loss_err:.1e}")


# -- 3. latency oracles --------------------------------------------------------


def test_c03_latency_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t = random_trace(rng)
        worst = max(worst,
                    abs(average_lagging(t) - oracle_al(t.delays, t.source_ms)),
                    abs(average_proportion(t) - oracle_ap(t.delays, t.source_ms)),
                    abs(differentiable_average_lagging(t) - oracle_dal(t.delays, t.source_ms)))
    hand = DelayTrace(10.0, [2, 4, 6, 8, 10])
    al, ap = average_lagging(hand), average_proportion(hand)
    ok = worst <= 1e-9 and abs(al - 2.0) < 1e-12 and abs(ap - 0.6) < 1e-12
    record(3, "AL/AP/DAL match oracle, hand trace", ok, f"worst {worst:.1e}, AL {al}, AP {ap}")


# -- 4-8, 10. trained pipeline -------------------------------------------------


def _gap(experiments, mode, tau):
    return med(e.gap[mode][tau] for e in experiments)


def test_c04_mismatch_phenomenon(experiments):
    s = {tau: _gap(experiments, "baseline", tau) for tau in range(1, 21)}
    later = [s[tau] for tau in range(11, 21)]
    ok = s[1] <= s[20] - 0.15 and all(v > s[1] for v in later)
    record(4, "end-position similarity drop on the teacher", ok,
           f"s-1 {s[1]:.3f}, s-20 {s[20]:.3f}, min s-11..-20 {min(later):.3f}")


def test_c05_fai_closes_gap(experiments):
    base, fai = _gap(experiments, "baseline", 1), _gap(experiments, "fai", 1)
    record(5, "FAI raises last-position similarity by 0.10", fai >= base + 0.10, f"baseline {base:.3f}, fai {fai:.3f}")


def test_c06_fad_closes_further(experiments):
    fai, fast = _gap(experiments, "fai", 1), _gap(experiments, "fast", 1)
    record(6, "FAST last-position similarity at least FAI", fast >= fai, f"fai {fai:.4f}, fast {fast:.4f}")


def test_c07_quality_latency_ordering(experiments):
    problems = []
    for k in LOW_K:
        b = med(e.bleu("baseline", k) for e in experiments)
        f = med(e.bleu("fai", k) for e in experiments)
        s = med(e.bleu("fast", k) for e in experiments)
        if not f >= b + 1.0:
            problems.append(f"k={k}: fai {f:.2f} < baseline {b:.2f} + 1")
        if not s >= f:
            problems.append(f"k={k}: fast {s:.2f} < fai {f:.2f}")
    for mode in ("baseline", "fai", "fast"):
        gap = med(abs(e.bleu(mode, 30) - e.offline_bleu) for e in experiments)
        if not gap <= 2.0:
            problems.append(f"k=30 {mode} is {gap:.2f} from offline")
    record(7, "BLEU ordering at low k, convergence at k=30", not problems, "; ".join(problems))


def test_c08_mask_count_saturation(experiments):
    wide = f"fast-m{EXTRA_M}"
    diff9 = med(abs(e.bleu("fast", 9) - e.bleu(wide, 9)) for e in experiments)
    problems = [] if diff9 < 1.5 else [f"k=9 m=20 vs m={EXTRA_M} differ by {diff9:.2f}"]
    for k in LOW_K:
        m0 = med(e.bleu("baseline", k) for e in experiments)
        m20 = med(e.bleu("fast", k) for e in experiments)
        if not m0 <= m20 - 1.0:
            problems.append(f"k={k}: m=0 {m0:.2f} vs m=20 {m20:.2f}")
    record(8, "m-sweep saturation", not problems, "; ".join(problems))


def test_c10_monotonicity_groups(experiments):
    def lift(e, group):
        return np.mean([e.groups["fai"][group][k] - e.groups["baseline"][group][k] for k in LOW_K])

    hard = med(lift(e, "hard") for e in experiments)
    easy = med(lift(e, "easy") for e in experiments)
    record(10, "FAI gain on Hard at least gain on Easy", hard >= easy, f"hard {hard:+.2f}, easy {easy:+.2f}")


# -- 9. policy contract ----------------------------------------------------------


def test_c09_policy_contract(experiments):
    problems, checked = [], 0
    for e in experiments:
        prof = e.profile
        lo = N_SPECIAL + e.teacher.cfg.src_vocab
        for mode, sw in e.sweeps.items():
            m = EXTRA_M if mode == f"fast-m{EXTRA_M}" else prof.m
            for k, sessions in sw.sessions.items():
                policy = StreamPolicy(k, m, prof.discard_rate, prof.chunk_frames, fai=mode != "baseline")
                for res in sessions:
                    checked += 1
                    problems += check_policy_contract(res, policy)
                    if [w.emitted_before for w in res.writes] != list(range(len(res.writes))):
                        problems.append(f"utt {res.uid}: emitted prefix changed between writes")
                    if [w.token - lo for w in res.writes if w.token != EOS] != res.hyp:
                        problems.append(f"utt {res.uid}: hypothesis differs from the written tokens")
                    if prof.discard_rate == 1.0 and any(w.rows_seen != w.real_rows for w in res.writes):
                        problems.append(f"utt {res.uid}: mask rows reached the decoder")
    record(9, "wait-k contract, no retraction, p=1 hides masks", not problems and checked > 0, "; ".join(problems[:5]))


# -- 11. freezing ------------------------------------------------------------------


def test_c11_freezing(experiments):
    e = experiments[0]
    teacher = e.teacher.state_dict()
    problems = []
    for m, student in e.students.items():
        for name, value in student.state_dict().items():
            if name.startswith(("semantic.", "decoder.")) and not np.array_equal(value, teacher[name]):
                problems.append(f"m={m}: {name} moved")
    train = make_splits(CorpusConfig(n_utterances=20, seed=0))["train"]
    idle = train_fad(e.teacher, train, FadConfig(m=e.profile.m, epochs=0))
    for name, value in idle.state_dict().items():
        if not np.array_equal(value, teacher[name]):
            problems.append(f"0 steps: {name} differs")
    record(11, "frozen tensors bit-identical", not problems, "; ".join(problems[:5]))


# -- 12. determinism -------------------------------------------------------------------


def test_c12_end_to_end_determinism(tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cmd = [sys.executable, "-m", "fast_st.cli", "run", "--profile", "smoke", "--seed", "0", "--quiet", "--out-dir", str(out)]
        subprocess.run(cmd, check=True)
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = bool(names) and all(filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False) for n in names)
    record(12, "byte-identical metric CSVs", same and "metrics.csv" in names, f"files {names}")
