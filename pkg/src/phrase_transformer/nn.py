"""Neural building blocks composed from :mod:`phrase_transformer.tensor`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Parameter container. Parameters are found by walking attributes in definition order."""

    training = True

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + key, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter (and constant buffer) to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        pass


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-6):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate, rng):
        self.rate = float(rate)
        self.rng = rng

    def __call__(self, x):
        return T.dropout(x, self.rate, self.rng, self.training)


def layer_norm(x, gain, bias, epsilon=1e-6):
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: gain/bias must have shape ({x.shape[-1]},)")
    return T.layer_norm(x, gain, bias, epsilon)


def sinusoidal_table(n_positions, d_model, dtype=None):
    """Fixed sin/cos position table, sin on even and cos on odd channels."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table.astype(dtype or T.default_dtype())


def embed_and_position(token_ids, embedding_matrix, position_table, scale):
    """``embedding[id] * scale + position_table[i]`` for ids of shape [..., L]."""
    token_ids = np.asarray(token_ids)
    vocab = embedding_matrix.shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab):
        bad = int(token_ids[(token_ids < 0) | (token_ids >= vocab)].flat[0])
        raise ValueError(f"token id {bad} out of range for vocabulary of size {vocab}")
    length = token_ids.shape[-1]
    if length > position_table.shape[0]:
        raise ValueError(f"sequence length {length} exceeds {position_table.shape[0]} positions")
    x = T.take_rows(embedding_matrix, token_ids) * scale
    pos = position_table[:length]
    if not isinstance(pos, Tensor):
        pos = Tensor(pos.astype(x.dtype, copy=False))
    return x + pos


class Embedding(Module):
    def __init__(self, vocab, d_model, rng):
        self.weight = Parameter(rng.normal(0.0, d_model**-0.5, size=(vocab, d_model)))

    def __call__(self, ids):
        return T.take_rows(self.weight, ids)


@dataclass(frozen=True)
class AttentionMask:
    """Which keys each query may attend to.

    ``valid`` is a boolean array broadcastable to ``[batch, heads, queries, keys]``
    (or None for ``kind == "none"``).
    """

    kind: str
    valid: np.ndarray | None = None

    @classmethod
    def none(cls):
        return cls("none", None)

    @classmethod
    def padding(cls, key_valid):
        """From a ``[batch, keys]`` validity array."""
        kv = np.asarray(key_valid, dtype=bool)
        return cls("padding", kv[:, None, None, :])

    @classmethod
    def causal(cls, n):
        return cls("causal", np.tril(np.ones((n, n), dtype=bool))[None, None])

    @classmethod
    def padding_causal(cls, key_valid):
        kv = np.asarray(key_valid, dtype=bool)
        n = kv.shape[-1]
        tri = np.tril(np.ones((n, n), dtype=bool))
        return cls("padding+causal", kv[:, None, None, :] & tri[None, None])

    def grid(self, n_queries, n_keys, batch=1):
        """Dense ``[batch, 1, queries, keys]`` validity grid."""
        if self.valid is None:
            return np.ones((batch, 1, n_queries, n_keys), dtype=bool)
        return np.broadcast_to(self.valid, (batch, 1, n_queries, n_keys))


class MultiHeadAttention(Module):
    """Holds ``w_q, w_k, w_v, w_o`` (with biases) for ``n_heads`` heads of width ``d_model // n_heads``."""

    def __init__(self, d_model, n_heads, rng, dropout=0.0):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_o = Linear(d_model, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, q_seq, k_seq, v_seq, mask=None):
        return multi_head_attention(q_seq, k_seq, v_seq, mask or AttentionMask.none(), self, self.drop)


def multi_head_attention(q_seq, k_seq, v_seq, mask, params, dropout=None):
    """Scaled dot-product attention in ``params.n_heads`` heads, concatenated and projected.

    Sequences are ``[batch, length, d_model]`` (or unbatched ``[length, d_model]``).
    """
    unbatched = q_seq.ndim == 2
    if unbatched:
        q_seq, k_seq, v_seq = (t.reshape(1, *t.shape) for t in (q_seq, k_seq, v_seq))
    if k_seq.shape[1] != v_seq.shape[1]:
        raise ValueError(f"keys ({k_seq.shape[1]}) and values ({v_seq.shape[1]}) differ in length")
    b, lq, d = q_seq.shape
    lk = k_seq.shape[1]
    h, dk = params.n_heads, params.d_k
    if h * dk != d:
        raise ValueError(f"model dim {d} inconsistent with {h} heads of width {dk}")
    q = T.transpose(params.w_q(q_seq).reshape(b, lq, h, dk), (0, 2, 1, 3))
    k = T.transpose(params.w_k(k_seq).reshape(b, lk, h, dk), (0, 2, 3, 1))
    v = T.transpose(params.w_v(v_seq).reshape(b, lk, h, dk), (0, 2, 1, 3))
    scores = (q @ k) * (1.0 / np.sqrt(dk))
    probs = T.masked_softmax(scores, mask.valid)
    if dropout is not None:
        probs = dropout(probs)
    out = T.transpose(probs @ v, (0, 2, 1, 3)).reshape(b, lq, d)
    out = params.w_o(out)
    return out.reshape(lq, d) if unbatched else out


class FeedForward(Module):
    def __init__(self, d_model, d_ffn, rng, dropout=0.0):
        self.w1 = Linear(d_model, d_ffn, rng)
        self.w2 = Linear(d_ffn, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x):
        return self.w2(self.drop(T.relu(self.w1(x))))


def feed_forward(x, w1, b1, w2, b2, dropout_rate=0.0, rng=None, training=False):
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""
    if w1.shape[0] != x.shape[-1] or w2.shape != (w1.shape[1], x.shape[-1]):
        raise ValueError(f"feed_forward: incompatible shapes x{x.shape} w1{w1.shape} w2{w2.shape}")
    hidden = T.relu(x @ w1 + b1)
    if rng is not None:
        hidden = T.dropout(hidden, dropout_rate, rng, training)
    return hidden @ w2 + b2
