"""Acoustic encoder, semantic encoder and decoder of the speech translation model."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat, no_grad, parameter, where
from .cif import CifDetector, integrate_fire
from .nn import (
    DecoderLayer,
    Embedding,
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    causal_bias,
    key_padding_bias,
    sinusoidal_positions,
)

PAD, EOS, ASR_TAG, ST_TAG = 0, 1, 2, 3
N_SPECIAL = 4

_POS_CACHE: dict[int, np.ndarray] = {}


def positions(n: int, d: int) -> np.ndarray:
    table = _POS_CACHE.get(d)
    if table is None or table.shape[0] < n:
        table = sinusoidal_positions(max(n, 512), d)
        _POS_CACHE[d] = table
    return table[:n]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    d: int = 32
    n_heads: int = 4
    d_ff: int = 128
    stride: int = 4
    acoustic_layers: int = 2
    semantic_layers: int = 2
    decoder_layers: int = 2
    src_vocab: int = 64
    tgt_vocab: int = 64
    beta: float = 1.0
    tail_threshold: float = 0.5

    @property
    def vocab(self) -> int:
        return N_SPECIAL + self.src_vocab + self.tgt_vocab

    def src_id(self, tok: int) -> int:
        return N_SPECIAL + tok

    def tgt_id(self, tok: int) -> int:
        return N_SPECIAL + self.src_vocab + tok

    def to_tgt_token(self, vid: int) -> int:
        return vid - N_SPECIAL - self.src_vocab

    def to_dict(self) -> dict:
        return asdict(self)


class AcousticEncoder(Module):
    """Convolutional subsampler + bidirectional transformer + trainable mask embedding.

    The subsampler is two kernel-2 / stride-2 convolutions, so output token
    ``i`` sees exactly frames ``[4i, 4i + 4)`` and a prefix of the input
    reproduces the corresponding prefix of the full-input tokens (up to float
    rounding of the batched matrix product).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.stride != 4:
            raise ValueError("the subsampler is built for a total stride of 4")
        self._cfg = cfg
        self.conv1 = Linear(2 * cfg.d_in, cfg.d, rng)
        self.conv2 = Linear(2 * cfg.d, cfg.d, rng)
        self.layers = [
            EncoderLayer(cfg.d, cfg.n_heads, cfg.d_ff, rng)
            for _ in range(cfg.acoustic_layers)
        ]
        self.mask_embedding = parameter(rng.normal(0.0, 1.0, size=cfg.d))

    @property
    def stride(self) -> int:
        return self._cfg.stride

    def n_tokens(self, n_frames: int) -> int:
        return -(-n_frames // self.stride)

    def conv_subsample(self, frames) -> Tensor:
        """(n, d_in) or (B, n, d_in) frames -> (tau, d) or (B, tau, d) speech tokens."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        single = x.ndim == 2
        if single:
            x = x.reshape((1,) + x.shape)
        B, n, d_in = x.shape
        if n < self.stride:
            raise ValueError(f"need at least {self.stride} frames, got {n}")
        tau = self.n_tokens(n)
        pad = tau * self.stride - n
        if pad:
            x = concat([x, Tensor(np.zeros((B, pad, d_in)))], axis=1)
        h = self.conv1(x.reshape(B, tau * 2, 2 * d_in)).gelu()
        # scaled so token content is not swamped by the positional encoding
        c = self.conv2(h.reshape(B, tau, 2 * self._cfg.d)) * np.sqrt(self._cfg.d)
        return c[0] if single else c

    def encode(self, c: Tensor, lengths=None) -> Tensor:
        """Bidirectional transformer over (B, T, d) tokens; ``lengths`` masks padding."""
        B, T, d = c.shape
        x = c + positions(T, d)
        bias = None if lengths is None else key_padding_bias(lengths, T)
        for layer in self.layers:
            x = layer(x, bias)
        return x

    def encode_full(self, c) -> Tensor:
        c = Tensor._wrap(c)
        if c.shape[0] < 1:
            raise ValueError("cannot encode an empty token sequence")
        return self.encode(c.reshape((1,) + c.shape))[0]

    def append_masks(self, c_prefix: Tensor, m: int) -> Tensor:
        if m == 0:
            return c_prefix
        masks = self.mask_embedding.reshape(1, -1) * np.ones((m, 1))
        return concat([c_prefix, masks], axis=0)

    def encode_streaming_fai(self, c_prefix, m: int, discard_rate: float = 1.0) -> Tensor:
        """Append ``m`` mask embeddings, encode, keep the first ``tau + round((1 - p) m)`` rows."""
        if m < 0:
            raise ValueError("mask count must be non-negative")
        if not 0.0 <= discard_rate <= 1.0:
            raise ValueError("discard rate must lie in [0, 1]")
        c_prefix = Tensor._wrap(c_prefix)
        tau = c_prefix.shape[0]
        out = self.encode_full(self.append_masks(c_prefix, m))
        keep = tau + kept_mask_rows(m, discard_rate)
        return out[:keep]


def kept_mask_rows(m: int, discard_rate: float) -> int:
    return int(round((1.0 - discard_rate) * m))


class SemanticEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_in = LayerNorm(cfg.d)
        self.layers = [EncoderLayer(cfg.d, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.semantic_layers)]
        self.ln_out = LayerNorm(cfg.d)

    def __call__(self, h: Tensor, lengths=None) -> Tensor:
        B, T, d = h.shape
        if T == 0:
            return h
        x = self.ln_in(h) + positions(T, d)
        bias = None if lengths is None else key_padding_bias(lengths, T)
        for layer in self.layers:
            x = layer(x, bias)
        return self.ln_out(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._d = cfg.d
        self.embed = Embedding(cfg.vocab, cfg.d, rng)
        self.layers = [DecoderLayer(cfg.d, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.decoder_layers)]
        self.ln_out = LayerNorm(cfg.d)
        self.proj = Linear(cfg.d, cfg.vocab, rng)

    def __call__(self, dec_in: np.ndarray, mem: Tensor, mem_lengths=None) -> Tensor:
        """Logits (B, L, V) for decoder input ids (B, L) attending over ``mem`` (B, T, d)."""
        dec_in = np.asarray(dec_in, dtype=np.int64)
        B, L = dec_in.shape
        y = self.embed(dec_in) * np.sqrt(self._d) + positions(L, self._d)
        self_bias = causal_bias(L)
        mem_bias = None if mem_lengths is None else key_padding_bias(mem_lengths, mem.shape[1])
        for layer in self.layers:
            y = layer(y, mem, self_bias, mem_bias)
        return self.proj(self.ln_out(y))


class SpeechTranslator(Module):
    """Acoustic encoder -> CIF -> semantic encoder -> autoregressive decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        self._cfg = cfg
        self.acoustic = AcousticEncoder(cfg, rng)
        self.cif = CifDetector(cfg.d, rng, beta=cfg.beta, tail_threshold=cfg.tail_threshold)
        self.semantic = SemanticEncoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def clone(self) -> "SpeechTranslator":
        return copy.deepcopy(self)

    # -- inference helpers (no graph) -------------------------------------
    def speech_tokens(self, frames: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.acoustic.conv_subsample(frames).data

    def shrink(self, a: np.ndarray, mode: str = "offline"):
        with no_grad():
            alpha = self.cif(Tensor(a)).data
        return integrate_fire(a, alpha, self.cfg.beta, mode=mode, tail_threshold=self.cfg.tail_threshold)

    def memory(self, h: np.ndarray) -> np.ndarray:
        """Semantic-encoder output for shrunk states ``h`` (J', d)."""
        with no_grad():
            return self.semantic(Tensor(h[None]))[0].data

    def next_token_logits(self, mem: np.ndarray, prefix: list[int], tag: int = ST_TAG) -> np.ndarray:
        with no_grad():
            dec_in = np.array([[tag] + list(prefix)], dtype=np.int64)
            logits = self.decoder(dec_in, Tensor(mem[None]))
        return logits.data[0, -1]

    def greedy_decode(self, h: np.ndarray, max_len: int | None = None, tag: int = ST_TAG) -> list[int]:
        """Argmax over the task's output vocabulary plus EOS; returns ids without EOS."""
        h = np.asarray(h, dtype=np.float64)
        if max_len is None:
            max_len = 2 * h.shape[0] + 5
        cfg = self.cfg
        lo = N_SPECIAL + (cfg.src_vocab if tag == ST_TAG else 0)
        hi = lo + (cfg.tgt_vocab if tag == ST_TAG else cfg.src_vocab)
        mem = self.memory(h)
        out: list[int] = []
        while len(out) < max_len:
            logits = self.next_token_logits(mem, out, tag)
            tok = lo + int(np.argmax(logits[lo:hi]))
            if logits[EOS] >= logits[tok]:
                break
            out.append(tok)
        return out

    def translate(self, frames: np.ndarray, max_len: int | None = None) -> list[int]:
        """Offline translation of a full utterance, as target-vocabulary tokens."""
        with no_grad():
            a = self.acoustic.encode_full(self.acoustic.conv_subsample(frames)).data
        res = self.shrink(a, mode="offline")
        ids = self.greedy_decode(res.states, max_len=max_len)
        return ids_to_target(ids, self.cfg)


def ids_to_target(ids: list[int], cfg: ModelConfig) -> list[int]:
    """Keep target-vocabulary ids (drop specials and stray source ids) and map to target tokens."""
    lo = N_SPECIAL + cfg.src_vocab
    return [i - lo for i in ids if i >= lo]


def average_states(states: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not states:
        raise ValueError("nothing to average")
    keys = states[0].keys()
    return {k: sum(s[k] for s in states) / len(states) for k in keys}


def build_model(cfg: ModelConfig, seed: int = 0) -> SpeechTranslator:
    return SpeechTranslator(cfg, seed=seed)


def masked_inputs(c: Tensor, mask: np.ndarray, embedding: Tensor) -> Tensor:
    """Replace positions where ``mask`` (B, T) is set by the mask embedding."""
    return where(mask[..., None], embedding, c)
