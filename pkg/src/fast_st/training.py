"""Masked pretraining of the acoustic encoder and two-stage offline training.

Stage 1 feeds the unshrunk acoustic representations straight into the
semantic encoder and learns ASR and ST jointly (the task is chosen by the tag
that starts the decoder input).  Stage 2 switches the CIF module on, rescales
its weights to the source length, and trains ST plus the CIF length loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam, Tensor, cross_entropy, no_grad
from .cif import cif_length_loss, contribution_matrix, scale_weights
from .corpus import Utterance
from .model import ASR_TAG, EOS, PAD, ST_TAG, SpeechTranslator, average_states, masked_inputs

logger = logging.getLogger(__name__)

LogFn = Callable[[dict], None]


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, stage: str):
        super().__init__(f"non-finite loss at step {step} ({stage})")
        self.step = step
        self.stage = stage


@dataclass
class OfflineConfig:
    batch_size: int = 16
    lr: float = 6e-3
    warmup: int = 200
    pretrain_steps: int = 400
    mask_coverage: float = 0.5
    stage1_epochs: int = 15
    stage2_epochs: int = 8
    lam: float = 1.0
    label_smoothing: float = 0.1
    n_average: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- batching ------------------------------------------------------------------


def pad_frames(utts: list[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    n = np.array([u.n_frames for u in utts])
    d_in = utts[0].frames.shape[1]
    out = np.zeros((len(utts), int(n.max()), d_in))
    for b, u in enumerate(utts):
        out[b, : u.n_frames] = u.frames
    return out, n


def decoder_io(seqs: list[list[int]], tags: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing input ``[tag, y_1 .. y_n]`` and target ``[y_1 .. y_n, EOS]``, PAD-filled."""
    L = max(len(s) for s in seqs) + 1
    dec_in = np.full((len(seqs), L), PAD, dtype=np.int64)
    tgt = np.full((len(seqs), L), PAD, dtype=np.int64)
    for b, (s, tag) in enumerate(zip(seqs, tags)):
        dec_in[b, 0] = tag
        dec_in[b, 1 : len(s) + 1] = s
        tgt[b, : len(s)] = s
        tgt[b, len(s)] = EOS
    return dec_in, tgt


def target_ids(model: SpeechTranslator, u: Utterance) -> list[int]:
    return [model.cfg.tgt_id(t) for t in u.tgt]


def source_ids(model: SpeechTranslator, u: Utterance) -> list[int]:
    return [model.cfg.src_id(t) for t in u.src]


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# -- losses --------------------------------------------------------------------


def st_loss(model: SpeechTranslator, h, y: list[int], smoothing: float = 0.0, tag: int = ST_TAG) -> Tensor:
    """Summed negative log-likelihood of target ids ``y`` (plus EOS) given shrunk states ``h``."""
    if len(y) == 0:
        raise ValueError("empty target sequence")
    h = Tensor._wrap(h)
    mem = model.semantic(h.reshape((1,) + h.shape))
    dec_in, tgt = decoder_io([list(y)], [tag])
    logits = model.decoder(dec_in, mem)
    return cross_entropy(logits, tgt, ignore_index=PAD, smoothing=smoothing, reduction="sum")


def offline_objective(model: SpeechTranslator, utt: Utterance, lam: float = 1.0, smoothing: float = 0.0):
    """``st + lam * |J - sum(alpha)|`` for one utterance; returns (total, st, cif) tensors."""
    c = model.acoustic.conv_subsample(utt.frames)
    a = model.acoustic.encode_full(c)
    alpha = model.cif(a)
    J = len(utt.src)
    l_cif = cif_length_loss(alpha, J)
    alpha_s = scale_weights(alpha.reshape(1, -1), [J], [alpha.shape[0]])
    W = contribution_matrix(alpha_s, J, model.cfg.beta)[0]
    h = (W @ a) * (1.0 / model.cfg.beta)
    l_st = st_loss(model, h, target_ids(model, utt), smoothing=smoothing)
    return l_st + l_cif * lam, l_st, l_cif


def _acoustic_batch(model: SpeechTranslator, utts: list[Utterance]):
    frames, n = pad_frames(utts)
    tau = np.array([model.acoustic.n_tokens(int(k)) for k in n])
    c = model.acoustic.conv_subsample(Tensor(frames))
    a = model.acoustic.encode(c, tau)
    return a, tau


def stage1_loss(model: SpeechTranslator, utts: list[Utterance], tasks: list[int], smoothing: float) -> Tensor:
    a, tau = _acoustic_batch(model, utts)
    mem = model.semantic(a, tau)
    seqs = [source_ids(model, u) if t == ASR_TAG else target_ids(model, u) for u, t in zip(utts, tasks)]
    dec_in, tgt = decoder_io(seqs, tasks)
    logits = model.decoder(dec_in, mem, tau)
    return cross_entropy(logits, tgt, ignore_index=PAD, smoothing=smoothing, reduction="sum") * (1.0 / len(utts))


def stage2_loss(model: SpeechTranslator, utts: list[Utterance], lam: float, smoothing: float):
    a, tau = _acoustic_batch(model, utts)
    alpha = model.cif(a)
    J = np.array([len(u.src) for u in utts])
    l_cif = cif_length_loss(alpha, J, tau).mean()
    alpha_s = scale_weights(alpha, J, tau)
    W = contribution_matrix(alpha_s, int(J.max()), model.cfg.beta)
    h = (W @ a) * (1.0 / model.cfg.beta)
    mem = model.semantic(h, J)
    dec_in, tgt = decoder_io([target_ids(model, u) for u in utts], [ST_TAG] * len(utts))
    logits = model.decoder(dec_in, mem, J)
    l_st = cross_entropy(logits, tgt, ignore_index=PAD, smoothing=smoothing, reduction="sum") * (1.0 / len(utts))
    return l_st + l_cif * lam, l_st, l_cif


def dev_st_loss(model: SpeechTranslator, dev: list[Utterance], stage: int, batch_size: int = 64) -> float:
    """Mean per-token ST negative log-likelihood on ``dev`` (no smoothing)."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(dev), batch_size):
            chunk = dev[i : i + batch_size]
            n_tok = sum(len(u.tgt) + 1 for u in chunk)
            if stage == 1:
                loss = stage1_loss(model, chunk, [ST_TAG] * len(chunk), 0.0)
            else:
                _, loss, _ = stage2_loss(model, chunk, 0.0, 0.0)
            total += loss.item() * len(chunk)
            count += n_tok
    return total / count


# -- masked pretraining -----------------------------------------------------------


def sample_span_mask(tau: int, rng: np.random.Generator, coverage: float = 0.5, span=(2, 5)) -> np.ndarray:
    """Random spans (length uniform in ``span``) until at least ``coverage`` of positions are masked."""
    mask = np.zeros(tau, dtype=bool)
    target = coverage * tau
    guard = 0
    while mask.sum() < target and guard < 10 * tau:
        length = int(rng.integers(span[0], span[1] + 1))
        start = int(rng.integers(0, max(tau - length, 0) + 1))
        mask[start : start + length] = True
        guard += 1
    return mask


def masked_pretrain_loss(model: SpeechTranslator, c: np.ndarray, lengths: np.ndarray, mask: np.ndarray) -> Tensor:
    """MSE between encoder outputs and clean tokens over masked positions.

    ``c`` is a fixed (B, T, d) array of clean speech tokens; gradients reach the
    transformer layers and the mask embedding.
    """
    mask = mask & (np.arange(c.shape[1])[None, :] < lengths[:, None])
    n = int(mask.sum())
    x = masked_inputs(Tensor(c), mask, model.acoustic.mask_embedding)
    out = model.acoustic.encode(x, lengths)
    if n == 0:
        return (out * 0.0).sum()
    diff = (out - c) * mask[..., None]
    return (diff * diff).sum() * (1.0 / (n * c.shape[2]))


def masked_pretrain_step(model, utts, opt: Adam, rng: np.random.Generator, coverage: float = 0.5) -> float:
    frames, n = pad_frames(utts)
    tau = np.array([model.acoustic.n_tokens(int(k)) for k in n])
    with no_grad():
        c = model.acoustic.conv_subsample(Tensor(frames)).data
    mask = np.zeros(c.shape[:2], dtype=bool)
    for b, t in enumerate(tau):
        mask[b, :t] = sample_span_mask(int(t), rng, coverage)
    loss = masked_pretrain_loss(model, c, tau, mask)
    loss.backward()
    opt.step()
    return loss.item()


def acoustic_transformer_params(model: SpeechTranslator) -> dict:
    """Parameters touched by masked pretraining (the subsampler stays at its initialisation)."""
    params = model.acoustic.named_parameters("acoustic.")
    return {k: v for k, v in params.items() if not k.startswith(("acoustic.conv1", "acoustic.conv2"))}


def pretrain_acoustic(model: SpeechTranslator, corpus: list[Utterance], cfg: OfflineConfig, log: LogFn | None = None) -> list[float]:
    opt = Adam(acoustic_transformer_params(model), lr=cfg.lr, warmup=cfg.warmup)
    rng = np.random.default_rng([cfg.seed, 11])
    losses = []
    for step in range(1, cfg.pretrain_steps + 1):
        idx = rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False)
        loss = masked_pretrain_step(model, [corpus[i] for i in idx], opt, rng, cfg.mask_coverage)
        if not math.isfinite(loss):
            raise TrainingDivergence(step, "pretrain")
        losses.append(loss)
        if log is not None:
            log({"step": step, "stage": "pretrain", "loss": loss})
    return losses


# -- offline training --------------------------------------------------------------


@dataclass
class OfflineResult:
    model: SpeechTranslator
    dev_stage1: float
    dev_stage2: float
    stage2_history: list[tuple[int, float]]


def _run_epoch(model, corpus, cfg: OfflineConfig, stage: int, opt: Adam, epoch: int, log) -> None:
    rng = np.random.default_rng([cfg.seed, 100 + stage, epoch])
    for idx in batches(len(corpus), cfg.batch_size, rng):
        utts = [corpus[i] for i in idx]
        if stage == 1:
            tasks = [ASR_TAG if r < 0.5 else ST_TAG for r in rng.random(len(utts))]
            loss = stage1_loss(model, utts, tasks, cfg.label_smoothing)
            rec = {"loss": loss.item()}
        else:
            loss, l_st, l_cif = stage2_loss(model, utts, cfg.lam, cfg.label_smoothing)
            rec = {"loss": loss.item(), "st": l_st.item(), "cif": l_cif.item()}
        if not math.isfinite(rec["loss"]):
            raise TrainingDivergence(opt.step_count + 1, f"stage{stage}")
        loss.backward()
        opt.step()
        if log is not None:
            log({"step": opt.step_count, "stage": f"stage{stage}", "epoch": epoch, **rec})


class OfflineTrainer:
    """Two-stage schedule that can be checkpointed and resumed at epoch boundaries.

    Each epoch draws its batch order from ``(seed, stage, epoch)``, so a run
    resumed from a saved state continues bit-identically.
    """

    def __init__(self, model: SpeechTranslator, train: list[Utterance], dev: list[Utterance], cfg: OfflineConfig, log: LogFn | None = None):
        if not train:
            raise ValueError("empty training corpus")
        self.model = model
        self.train = train
        self.dev = dev
        self.cfg = cfg
        self.log = log
        self.stage = 1
        self.epoch = 0
        self.dev1 = float("nan")
        self.snapshots: list[tuple[float, int, dict]] = []
        self.opt = self._optimizer(1)

    def _optimizer(self, stage: int) -> Adam:
        params = self.model.named_parameters()
        if stage == 1:
            params = {k: v for k, v in params.items() if not k.startswith("cif.")}
        return Adam(params, lr=self.cfg.lr, warmup=self.cfg.warmup)

    @property
    def done(self) -> bool:
        return self.stage > 2

    def step_epoch(self) -> None:
        """Run one epoch of the current stage and advance the schedule."""
        cfg = self.cfg
        n_epochs = cfg.stage1_epochs if self.stage == 1 else cfg.stage2_epochs
        if self.epoch < n_epochs:
            _run_epoch(self.model, self.train, cfg, self.stage, self.opt, self.epoch, self.log)
            if self.stage == 2:
                loss = dev_st_loss(self.model, self.dev, stage=2)
                self.snapshots.append((loss, self.epoch, self.model.state_dict()))
                if self.log is not None:
                    self.log({"stage": "stage2-dev", "epoch": self.epoch, "dev_st": loss})
            self.epoch += 1
        if self.epoch >= n_epochs:
            if self.stage == 1:
                self.dev1 = dev_st_loss(self.model, self.dev, stage=1)
                logger.info("stage 1 dev ST loss %.4f", self.dev1)
                self.opt = self._optimizer(2)
            self.stage += 1
            self.epoch = 0

    def run(self, max_epochs: int | None = None) -> OfflineResult | None:
        """Train to completion (or for at most ``max_epochs`` more epochs, returning None if unfinished)."""
        count = 0
        while not self.done:
            if max_epochs is not None and count >= max_epochs:
                return None
            self.step_epoch()
            count += 1
        return self.finish()

    def finish(self) -> OfflineResult:
        if self.snapshots:
            best = sorted(self.snapshots, key=lambda s: (s[0], s[1]))[: self.cfg.n_average]
            self.model.load_state_dict(average_states([s[2] for s in best]))
        dev2 = dev_st_loss(self.model, self.dev, stage=2)
        logger.info("stage 2 dev ST loss %.4f (averaged)", dev2)
        history = [(e, loss) for loss, e, _ in self.snapshots]
        return OfflineResult(self.model, self.dev1, dev2, history)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update(self.opt.state_dict())
        out["trainer.stage"] = np.array([float(self.stage)])
        out["trainer.epoch"] = np.array([float(self.epoch)])
        out["trainer.dev1"] = np.array([self.dev1])
        for i, (loss, epoch, state) in enumerate(self.snapshots):
            out[f"snap{i}.meta"] = np.array([loss, float(epoch)])
            out.update({f"snap{i}.{k}": v for k, v in state.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
        self.stage = int(state["trainer.stage"][0])
        self.epoch = int(state["trainer.epoch"][0])
        self.dev1 = float(state["trainer.dev1"][0])
        self.opt = self._optimizer(min(self.stage, 2))
        self.opt.load_state_dict(state)
        self.snapshots = []
        i = 0
        while f"snap{i}.meta" in state:
            loss, epoch = state[f"snap{i}.meta"]
            prefix = f"snap{i}."
            snap = {k[len(prefix):]: v.copy() for k, v in state.items() if k.startswith(prefix) and k != f"snap{i}.meta"}
            self.snapshots.append((float(loss), int(epoch), snap))
            i += 1


def train_offline(
    model: SpeechTranslator,
    train: list[Utterance],
    dev: list[Utterance],
    cfg: OfflineConfig,
    log: LogFn | None = None,
) -> OfflineResult:
    """Two-stage schedule; returns the average of the best ``n_average`` stage-2 epochs on dev."""
    return OfflineTrainer(model, train, dev, cfg, log).run()
