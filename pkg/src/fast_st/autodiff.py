"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records a
backward closure on its output.  :meth:`Tensor.backward` walks the recorded
graph in reverse topological order, so each node is visited exactly once.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen teachers)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _arr(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the compute tape.

    ``data`` is always a float64 ndarray.  ``grad`` is ``None`` until a
    backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior nodes do not keep their gradient
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(-g, b.shape))

        return Tensor._result(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return Tensor._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g / b.data, a.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._wrap(other) / self

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._result(-a.data, (a,), lambda g: a._accum(-g))

    def __pow__(self, p: float) -> "Tensor":
        a = self
        p = float(p)

        def bw(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._result(a.data**p, (a,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._result(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)))

    def swapaxes(self, i: int, j: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with arrays, not tensors")
        a = self

        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._result(a.data[idx], (a,), bw)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis: int = -1) -> "Tensor":
        a = self

        def bw(g):
            a._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

        return Tensor._result(np.cumsum(a.data, axis=axis), (a,), bw)

    # -- unary math ---------------------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._result(out, (a,), lambda g: a._accum(g * out))

    def log(self) -> "Tensor":
        a = self
        return Tensor._result(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return Tensor._result(out, (a,), lambda g: a._accum(g * 0.5 / out))

    def abs(self) -> "Tensor":
        a = self
        return Tensor._result(np.abs(a.data), (a,), lambda g: a._accum(g * np.sign(a.data)))

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return Tensor._result(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))

    def sigmoid(self) -> "Tensor":
        a = self
        out = _sigmoid(a.data)
        return Tensor._result(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor._result(a.data * mask, (a,), lambda g: a._accum(g * mask))

    def gelu(self) -> "Tensor":
        # tanh approximation
        a = self
        x = a.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x * x * x)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

        return Tensor._result(out, (a,), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        out = _softmax(a.data, axis)

        def bw(g):
            a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return Tensor._result(out, (a,), bw)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse

        def bw(g):
            a._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

        return Tensor._result(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()


def parameter(data, name: str | None = None) -> Parameter:
    return Parameter(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def matmul(a, b) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return Tensor._result(a.data @ b.data, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accum(g[tuple(sl)])

    return Tensor._result(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(ts):
            t._accum(np.take(g, i, axis=axis))

    return Tensor._result(np.stack([t.data for t in ts], axis=axis), ts, bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._result(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    pick_a = a.data <= b.data
    return where(pick_a, a, b)


def maximum(a, b) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    pick_a = a.data >= b.data
    return where(pick_a, a, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(
                inv
                / n
                * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            )

    return Tensor._result(out, (x, gamma, beta), bw)


def softmax_rows(x: Tensor) -> Tensor:
    return Tensor._wrap(x).softmax(axis=-1)


def cosine_rows(a, b, eps: float = 0.0) -> Tensor:
    """Row-wise cosine similarity over the last axis.

    A row with zero norm on either side has similarity 0 (and zero gradient).
    """
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    dot = (a.data * b.data).sum(axis=-1)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    out = np.where(ok, dot / denom, 0.0)

    def bw(g):
        g = np.where(ok, g, 0.0)[..., None]
        na_s = np.where(ok, na, 1.0)[..., None]
        nb_s = np.where(ok, nb, 1.0)[..., None]
        c = out[..., None]
        if a.requires_grad:
            a._accum(g * (b.data / (na_s * nb_s) - c * a.data / (na_s * na_s)))
        if b.requires_grad:
            b._accum(g * (a.data / (na_s * nb_s) - c * b.data / (nb_s * nb_s)))

    return Tensor._result(out, (a, b), bw)


KL_EPS = 1e-6


def bernoulli_kl(p, q, eps: float = KL_EPS) -> Tensor:
    """Elementwise KL(Bernoulli(p) || Bernoulli(q)) with both clamped into [eps, 1-eps]."""
    p, q = Tensor._wrap(p), Tensor._wrap(q)
    pc = np.clip(p.data, eps, 1.0 - eps)
    qc = np.clip(q.data, eps, 1.0 - eps)
    out = pc * np.log(pc / qc) + (1.0 - pc) * np.log((1.0 - pc) / (1.0 - qc))
    p_in = (p.data >= eps) & (p.data <= 1.0 - eps)
    q_in = (q.data >= eps) & (q.data <= 1.0 - eps)

    def bw(g):
        if p.requires_grad:
            dp = np.log(pc / qc) - np.log((1.0 - pc) / (1.0 - qc))
            p._accum(_unbroadcast(g * dp * p_in, p.shape))
        if q.requires_grad:
            dq = -pc / qc + (1.0 - pc) / (1.0 - qc)
            q._accum(_unbroadcast(g * dq * q_in, q.shape))

    return Tensor._result(out, (p, q), bw)


def cross_entropy(
    logits: Tensor,
    targets,
    ignore_index: int | None = None,
    smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``logits`` has shape (..., V).  ``reduction`` is ``"mean"`` over counted
    targets, ``"sum"``, or ``"none"`` (per-position losses).
    """
    logits = Tensor._wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= V)):
        raise IndexError(f"target index out of range for vocabulary of size {V}")
    safe_t = np.where(valid, targets, 0)

    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    if smoothing > 0.0:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(axis=-1)
    nll = np.where(valid, nll, 0.0)

    count = max(int(valid.sum()), 1)
    if reduction == "mean":
        out, scale = nll.sum() / count, 1.0 / count
    elif reduction == "sum":
        out, scale = nll.sum(), 1.0
    elif reduction == "none":
        out, scale = nll, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        probs = np.exp(logp)
        target_dist = np.zeros_like(x)
        np.put_along_axis(target_dist, safe_t[..., None], 1.0 - smoothing, axis=-1)
        if smoothing > 0.0:
            target_dist += smoothing / V
        grad = probs - target_dist
        grad = grad * valid[..., None]
        if scale is None:
            grad = grad * g[..., None]
        else:
            grad = grad * (g * scale)
        logits._accum(grad)

    return Tensor._result(np.asarray(out, dtype=np.float64), (logits,), bw)


class Adam:
    """Adam with linear warmup followed by inverse square-root decay.

    The learning rate at step ``s`` (1-based) is
    ``lr * min(s / warmup, sqrt(warmup / s))``.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        warmup: int = 200,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        clip_norm: float | None = 1.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.warmup = max(int(warmup), 1)
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self, step: int | None = None) -> float:
        s = max(self.step_count if step is None else step, 1)
        return self.lr * min(s / self.warmup, math.sqrt(self.warmup / s))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.betas
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
        self.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["optim.step"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"optim.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"optim.v.{k}"], dtype=np.float64)


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (``x`` is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
