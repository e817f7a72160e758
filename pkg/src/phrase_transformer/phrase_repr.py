"""Attentive phrase representations and their per-decoder-layer mixture.

For each phrase: pool its token vectors into a summary (mean or max), score
every token against the summary with a small sigmoid network, softmax the
scores over the phrase's real slots and take the weighted sum of the token
vectors. One scorer per encoder level. Decoder layers read a softmax-weighted
mixture of all levels' phrase sequences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .segmentation import BatchedPlan, PhrasePlan, batch_plans

GLANCE_MODES = ("mean", "max")


def _check_slots(slot_mask):
    m = np.asarray(slot_mask, dtype=bool)
    if not m.any(axis=-1).all():
        raise ValueError("phrase has no valid slot")
    return m


def glance(token_vecs, slot_mask, mode="max"):
    """Summarize ``[..., m, d]`` token vectors over valid slots into ``[..., d]``."""
    m = _check_slots(slot_mask)
    if mode == "mean":
        w = m.astype(token_vecs.dtype)
        total = (token_vecs * w[..., None]).sum(axis=-2)
        return total / w.sum(axis=-1, keepdims=True)
    if mode == "max":
        floor = np.finfo(token_vecs.dtype).min
        return T.tmax(T.where(m[..., None], token_vecs, floor), axis=-2)
    raise ValueError(f"unknown glance mode {mode!r}; expected one of {GLANCE_MODES}")


class PhraseScorer(Module):
    """``s_i = W2 sigmoid(W1 [token_i | summary] + b1) + b2`` for one encoder level."""

    def __init__(self, d_model, hidden, rng):
        self.w1 = Linear(2 * d_model, hidden, rng)
        self.w2 = Linear(hidden, 1, rng)


def token_scores(token_vecs, summary, params):
    m = token_vecs.shape[-2]
    if summary.shape[-1] != token_vecs.shape[-1]:
        raise ValueError("summary and token vectors differ in width")
    tiled = summary.reshape(*summary.shape[:-1], 1, summary.shape[-1]) * np.ones(
        (m, 1), dtype=token_vecs.dtype
    )
    joined = T.concat([token_vecs, tiled], axis=-1)
    s = params.w2(T.sigmoid(params.w1(joined)))
    return s.reshape(s.shape[:-1])


def phrase_weights(scores, slot_mask):
    """Softmax of ``scores`` over valid slots; padded slots get exactly 0."""
    return T.masked_softmax(scores, _check_slots(slot_mask))


def phrase_vector(token_vecs, probs):
    """Weighted sum ``sum_i p_i * token_i``."""
    p = probs.reshape(*probs.shape[:-1], 1, probs.shape[-1])
    out = p @ token_vecs
    return out.reshape(*out.shape[:-2], out.shape[-1])


def gather_phrase_tokens(level_input, plan):
    """``[B, L, d]`` token vectors into ``[B, P, S, d]`` phrase slots."""
    b = level_input.shape[0]
    rows = np.arange(b)[:, None, None]
    return level_input[rows, plan.index]


def phrase_sequence_for_level(level_input, plan, params=None, mode="max"):
    """Phrase vectors for one encoder level.

    ``level_input`` is ``[B, L, d]`` with a :class:`BatchedPlan`, or ``[L, d]``
    with a single :class:`PhrasePlan`. With ``params=None`` the pooled summary
    itself is the phrase vector (no attentive scoring).
    """
    single = isinstance(plan, PhrasePlan)
    if single:
        if plan.seql != level_input.shape[0]:
            raise ValueError(f"plan covers {plan.seql} tokens, input has {level_input.shape[0]}")
        plan = batch_plans([plan])
        level_input = level_input.reshape(1, *level_input.shape)
    elif not isinstance(plan, BatchedPlan):
        raise TypeError("plan must be a PhrasePlan or BatchedPlan")
    mask = plan.gather_mask()
    tokens = gather_phrase_tokens(level_input, plan)
    summary = glance(tokens, mask, mode)
    if params is None:
        out = summary
    else:
        probs = phrase_weights(token_scores(tokens, summary, params), mask)
        out = phrase_vector(tokens, probs)
    return out.reshape(out.shape[1:]) if single else out


class TransparentWeights(Module):
    """Mixing logits ``[n_levels, n_decoder_layers]``, softmax-normalized over levels."""

    def __init__(self, n_levels, n_decoder_layers):
        self.logits = T.Parameter(np.zeros((n_levels, n_decoder_layers)))

    @property
    def n_levels(self):
        return self.logits.shape[0]

    def weights(self):
        return T.masked_softmax(self.logits, None, axis=0)


def transparent_combine(levels, j, tw, weights=None):
    """Mixture of the per-level phrase sequences for decoder layer ``j``.

    ``weights`` may pass a precomputed ``tw.weights()`` to share it across layers.
    """
    levels = list(levels)
    if len(levels) != tw.n_levels:
        raise ValueError(f"expected {tw.n_levels} levels, got {len(levels)}")
    shape = levels[0].shape
    for i, lv in enumerate(levels):
        if lv.shape != shape:
            raise ValueError(f"level {i} has shape {lv.shape}, level 0 has {shape}")
    w = tw.weights() if weights is None else weights
    col = w[:, j].reshape(len(levels), *([1] * len(shape)))
    return (T.stack(levels, axis=0) * col).sum(axis=0)
