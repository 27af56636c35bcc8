"""Future-aware distillation of a streaming student from an offline teacher.

The teacher sees the consumed speech tokens plus up to ``m`` tokens of oracle
future; the student sees the same consumed tokens followed by ``m`` mask
embeddings.  Over the consumed positions the student is pulled towards the
teacher's acoustic representations (cosine) and CIF weights (Bernoulli KL).
Only the student's acoustic transformer, mask embedding and CIF head train.
Both models share the teacher's subsampler output, so the student's
subsampler stays equal to the teacher's.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam, Tensor, bernoulli_kl, cosine_rows, no_grad, where
from .corpus import Utterance
from .model import SpeechTranslator
from .training import TrainingDivergence, batches, pad_frames

logger = logging.getLogger(__name__)

MIN_MASKS = 10


class MaskCountError(ValueError):
    pass


@dataclass
class FadConfig:
    m: int = 20
    epochs: int = 4
    batch_size: int = 32
    lr: float = 5e-4
    warmup: int = 100
    seed: int = 0
    use_w2v_loss: bool = True
    use_cif_loss: bool = True
    student_masks: bool = True
    allow_small_m: bool = False

    def __post_init__(self):
        if self.m < 0:
            raise MaskCountError("mask count must be non-negative")
        if self.m <= MIN_MASKS and not self.allow_small_m:
            raise MaskCountError(f"m={self.m} is too small to anticipate future context (need m > {MIN_MASKS})")
        if not (self.use_w2v_loss or self.use_cif_loss):
            raise ValueError("at least one distillation loss must be enabled")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_cut(T: int, rng: np.random.Generator) -> int:
    """Uniform streaming cut ``t`` in ``[1, T]``."""
    if T < 1:
        raise ValueError("utterance has no speech tokens")
    return int(rng.integers(1, T + 1))


def _tokens(model: SpeechTranslator, utts: list[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    frames, n = pad_frames(utts)
    tau = np.array([model.acoustic.n_tokens(int(k)) for k in n])
    with no_grad():
        c = model.acoustic.conv_subsample(Tensor(frames)).data
    return c, tau


def fad_batch_losses(
    teacher: SpeechTranslator,
    student: SpeechTranslator,
    c: np.ndarray,
    tau: np.ndarray,
    cuts: np.ndarray,
    m: int,
    student_masks: bool = True,
) -> tuple[Tensor, Tensor]:
    """Mean over the batch of the per-utterance (w2v, cif) distillation losses.

    ``c`` is (B, T, d) speech tokens with true lengths ``tau``; utterance ``b``
    is cut after ``cuts[b]`` tokens.
    """
    B, T, d = c.shape
    cuts = np.asarray(cuts)
    if np.any(cuts < 1) or np.any(cuts > tau):
        raise ValueError("cuts must lie in [1, tau]")
    t_max = int(cuts.max())
    teacher_len = np.minimum(cuts + m, tau)
    with no_grad():
        Lt = int(teacher_len.max())
        a_t = teacher.acoustic.encode(Tensor(c[:, :Lt]), teacher_len)
        alpha_t = teacher.cif(a_t[:, :t_max]).data
        a_t = a_t.data[:, :t_max]

    n_masks = m if student_masks else 0
    Ls = t_max + n_masks
    x = np.zeros((B, Ls, d))
    x[:, : min(T, Ls)] = c[:, : min(T, Ls)]
    pos = np.arange(Ls)[None, :]
    real = pos < cuts[:, None]
    x = where(real[..., None], Tensor(x), student.acoustic.mask_embedding)
    a_s = student.acoustic.encode(x, cuts + n_masks)[:, :t_max]
    alpha_s = student.cif(a_s)

    rows = (np.arange(t_max)[None, :] < cuts[:, None]).astype(np.float64)
    inv_t = (1.0 / cuts)[:, None]
    l_w2v = ((1.0 - cosine_rows(a_s, a_t)) * (rows * inv_t)).sum() * (1.0 / B)
    l_cif = (bernoulli_kl(alpha_t, alpha_s) * rows).sum() * (1.0 / B)
    return l_w2v, l_cif


def fad_losses(teacher: SpeechTranslator, student: SpeechTranslator, c, t: int, m: int, student_masks: bool = True):
    """Single-utterance (w2v, cif) losses for speech tokens ``c`` (T, d) cut after ``t``."""
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    return fad_batch_losses(teacher, student, c[None], np.array([c.shape[0]]), np.array([t]), m, student_masks)


def make_student(teacher: SpeechTranslator) -> SpeechTranslator:
    student = teacher.clone()
    student.semantic.set_trainable(False)
    student.decoder.set_trainable(False)
    return student


def student_params(student: SpeechTranslator) -> dict:
    params = student.acoustic.named_parameters("acoustic.")
    params = {k: v for k, v in params.items() if not k.startswith(("acoustic.conv1", "acoustic.conv2"))}
    params.update(student.cif.named_parameters("cif."))
    return params


class FadTrainer:
    """FAD loop that can be checkpointed and resumed at epoch boundaries."""

    def __init__(self, teacher: SpeechTranslator, corpus: list[Utterance], cfg: FadConfig, log: Callable[[dict], None] | None = None):
        if not corpus:
            raise ValueError("empty training corpus")
        self.teacher = teacher
        self.corpus = corpus
        self.cfg = cfg
        self.log = log
        self.student = make_student(teacher)
        self.opt = Adam(student_params(self.student), lr=cfg.lr, warmup=cfg.warmup)
        self.epoch = 0

    @property
    def done(self) -> bool:
        return self.epoch >= self.cfg.epochs

    def step_epoch(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 300, self.epoch])
        for idx in batches(len(self.corpus), cfg.batch_size, rng):
            utts = [self.corpus[i] for i in idx]
            c, tau = _tokens(self.teacher, utts)
            cuts = np.array([sample_cut(int(t), rng) for t in tau])
            l_w2v, l_cif = fad_batch_losses(self.teacher, self.student, c, tau, cuts, cfg.m, cfg.student_masks)
            loss = None
            if cfg.use_w2v_loss:
                loss = l_w2v
            if cfg.use_cif_loss:
                loss = l_cif if loss is None else loss + l_cif
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(self.opt.step_count + 1, "fad")
            loss.backward()
            self.opt.step()
            if self.log is not None:
                self.log({"step": self.opt.step_count, "stage": "fad", "epoch": self.epoch, "loss": value,
                          "w2v": l_w2v.item(), "cif": l_cif.item()})
        self.epoch += 1

    def run(self, max_epochs: int | None = None) -> SpeechTranslator | None:
        count = 0
        while not self.done:
            if max_epochs is not None and count >= max_epochs:
                return None
            self.step_epoch()
            count += 1
        return self.student

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.student.state_dict().items()}
        out.update(self.opt.state_dict())
        out["trainer.epoch"] = np.array([float(self.epoch)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.student.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
        self.opt.load_state_dict(state)
        self.epoch = int(state["trainer.epoch"][0])


def train_fad(
    teacher: SpeechTranslator,
    corpus: list[Utterance],
    cfg: FadConfig,
    log: Callable[[dict], None] | None = None,
) -> SpeechTranslator:
    """Distil a streaming-aware student; the teacher is left untouched."""
    return FadTrainer(teacher, corpus, cfg, log).run()
