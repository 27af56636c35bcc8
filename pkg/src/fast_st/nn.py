"""Transformer building blocks on top of :mod:`fast_st.autodiff`."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Parameter, Tensor, concat, layer_norm, parameter

NEG_INF = -1e9


class Module:
    """Parameter container; attributes that are parameters or modules are discovered by walking ``vars``."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"missing tensors in state: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def _param(arr: np.ndarray) -> Parameter:
    return parameter(arr)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = _param(rng.normal(0.0, 1.0 / math.sqrt(d), size=(n, d)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids, dtype=np.int64)]


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def key_padding_bias(lengths, max_len: int) -> np.ndarray:
    """Additive attention bias of shape (B, 1, 1, max_len): 0 for real keys, -1e9 for padding."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_bias(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError("model dim must be divisible by head count")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.kv = Linear(d, 2 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, mem: Tensor, bias: np.ndarray | None = None) -> Tensor:
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        if Tk == 0:
            # nothing to attend to: the context vector is zero
            return self.out(Tensor(np.zeros((B, Tq, d))))
        H = self.n_heads
        dh = d // H
        q = self.q(x).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        kv = self.kv(mem).reshape(B, Tk, 2, H, dh).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        att = scores.softmax(axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Pre-norm bidirectional self-attention block."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, bias)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    """Pre-norm block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)

    def __call__(self, y: Tensor, mem: Tensor, self_bias: np.ndarray, mem_bias: np.ndarray | None) -> Tensor:
        h = self.ln1(y)
        y = y + self.self_attn(h, h, self_bias)
        y = y + self.cross_attn(self.ln2(y), mem, mem_bias)
        return y + self.ff(self.ln3(y))


def pad_stack(rows: list[Tensor], max_len: int | None = None) -> Tensor:
    """Stack variable-length (T_i, d) tensors into (B, max_len, d), zero-padded."""
    max_len = max_len if max_len is not None else max(r.shape[0] for r in rows)
    padded = []
    for r in rows:
        extra = max_len - r.shape[0]
        if extra > 0:
            r = concat([r, Tensor(np.zeros((extra,) + r.shape[1:]))], axis=0)
        padded.append(r.reshape((1,) + r.shape))
    return concat(padded, axis=0)
