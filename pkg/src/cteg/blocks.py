"""Shared transformer building blocks: attention, positional encoding, FFN."""

import numpy as np

from .tensor import (Tensor, ContractError, ShapeError, concat, gelu,
                     layer_norm, masked_fill, matmul, reshape, softmax_lastdim,
                     transpose)


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform((fan_in, fan_out))
    return (2.0 * u - 1.0) * limit


class Linear:
    def __init__(self, rng, d_in, d_out, init_scale=1.0):
        self.w = Tensor(xavier_uniform(rng, d_in, d_out) * init_scale, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return matmul(x, self.w) + self.b

    def parameters(self):
        return {"w": self.w, "b": self.b}


class LayerNormWeights:
    def __init__(self, d, eps=1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class AttentionWeights:
    """Per-head query/key/value projections plus the output projection.

    The per-head matrices are stored stacked: wq/wk/wv are (d, d) with head i
    occupying columns [i*d_head, (i+1)*d_head).
    """

    def __init__(self, rng, d, heads):
        if d % heads != 0:
            raise ContractError(f"attention width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def parameters(self):
        out = {}
        for tag, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            for k, v in lin.parameters().items():
                out[f"w{tag}.{k}"] = v
        return out


def causal_mask(T, include_self=True):
    """Boolean (T, T) mask; True = key position is visible to the query row.

    include_self=True gives the usual inclusive lower triangle.  With
    include_self=False the triangle is strict, except that row 0 keeps
    position 0 (the slot a shifted sequence's start sentinel occupies), so no
    row is left without a visible key.
    """
    if T < 1:
        raise ContractError("causal_mask: T must be >= 1")
    if include_self:
        return np.tril(np.ones((T, T), dtype=bool))
    m = np.tril(np.ones((T, T), dtype=bool), k=-1)
    m[0, 0] = True
    return m


def _split_heads(x, heads, d_head):
    # (..., T, d) -> (..., heads, T, d_head)
    T = x.shape[-2]
    parts = list(x.shape[:-1]) + [heads, d_head]
    x = reshape(x, tuple(parts))
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return transpose(x, perm)


def _merge_heads(x):
    # (..., heads, T, d_head) -> (..., T, heads*d_head)
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    x = transpose(x, perm)
    parts = list(x.shape[:-2]) + [x.shape[-2] * x.shape[-1]]
    return reshape(x, tuple(parts))


def multi_head_attention(q_in, k_in, v_in, mask, w):
    """Scaled dot-product attention over the last two axes.

    q_in: (..., Tq, d), k_in/v_in: (..., Tk, d); leading batch axes must match.
    mask: optional boolean (Tq, Tk); True marks an attendable key.  Every
    query row must keep at least one visible key.
    """
    if q_in.shape[-1] != w.d or k_in.shape[-1] != w.d:
        raise ShapeError(f"attention: inputs of width {q_in.shape[-1]} vs weights of width {w.d}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ContractError("attention: a query row has no visible keys")

    q = _split_heads(w.wq(q_in), w.heads, w.d_head)
    k = _split_heads(w.wk(k_in), w.heads, w.d_head)
    v = _split_heads(w.wv(v_in), w.heads, w.d_head)

    perm = list(range(k.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    scores = matmul(q, transpose(k, perm)) * (1.0 / np.sqrt(w.d_head))
    if mask is not None:
        scores = masked_fill(scores, mask, -np.inf)
    attn = softmax_lastdim(scores)
    out = _merge_heads(matmul(attn, v))
    return w.wo(out)


def sinusoidal_pe(T, d):
    """Fixed sinusoidal positional encoding matrix of shape (T, d)."""
    if d % 2 != 0:
        raise ContractError(f"sinusoidal_pe: d must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class FFNWeights:
    """Position-wise feed-forward: linear -> GELU -> linear."""

    def __init__(self, rng, d_model, d_ff):
        self.lin1 = Linear(rng, d_model, d_ff)
        self.lin2 = Linear(rng, d_ff, d_model)

    def parameters(self):
        out = {}
        for tag, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            for k, v in lin.parameters().items():
                out[f"{tag}.{k}"] = v
        return out


def ffn(x, w):
    return w.lin2(gelu(w.lin1(x)))
