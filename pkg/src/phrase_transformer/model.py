"""Transformer translation model with phrase representations.

Every encoder layer first cross-attends to phrase vectors pooled from its own
input, then runs self-attention and the feed-forward block. Every decoder
layer runs self-attention, cross-attention to source phrases, cross-attention
to source tokens and the feed-forward block. With
``phrase_representation=False`` the model is the plain post-norm Transformer.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import (
    AttentionMask,
    Dropout,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    embed_and_position,
    sinusoidal_table,
)
from .phrase_repr import PhraseScorer, TransparentWeights, phrase_sequence_for_level, transparent_combine
from .segmentation import BatchedPlan, batch_plans, plan_for
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 512
    d_ffn: int = 2048
    n_heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    dropout: float = 0.1
    attention_dropout: float = 0.0
    max_positions: int = 260
    phrase_representation: bool = True
    phrase_attention: bool = True
    transparent_attention: bool = True
    glance: str = "max"
    segmentation: str = "ngram"
    strict_budget: bool = False
    tie_target_classifier: bool = True
    learned_positions: bool = False
    scorer_hidden: int = 0
    ta_levels: str = "io"
    eps: float = 1e-6

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def hidden(self):
        return self.scorer_hidden or self.d_model

    @property
    def n_phrase_levels(self):
        """Encoder levels carrying phrase sequences: embedding output plus each layer output."""
        return self.enc_layers + 1 if self.ta_levels == "io" else self.enc_layers

    def errors(self):
        errs = []
        for name in ("src_vocab", "tgt_vocab", "d_model", "d_ffn", "n_heads", "enc_layers", "dec_layers", "max_positions"):
            if int(getattr(self, name)) < 1:
                errs.append(f"{name} must be positive")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            errs.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.src_vocab, self.tgt_vocab) <= UNK:
            errs.append("vocabularies must hold the four reserved tokens and at least one more")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        if not 0.0 <= self.attention_dropout < 1.0:
            errs.append("attention_dropout must be in [0, 1)")
        if self.glance not in ("mean", "max"):
            errs.append(f"glance must be 'mean' or 'max', got {self.glance!r}")
        if self.segmentation not in ("ngram", "tree"):
            errs.append(f"segmentation must be 'ngram' or 'tree', got {self.segmentation!r}")
        if self.ta_levels not in ("io", "inputs"):
            errs.append(f"ta_levels must be 'io' or 'inputs', got {self.ta_levels!r}")
        if self.scorer_hidden < 0:
            errs.append("scorer_hidden must be >= 0 (0 means d_model)")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ValueError("invalid model config: " + "; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ModelConfig.from_dict(d)


# Rows of the ablation table as config overrides.
ABLATIONS = {
    "base": dict(phrase_representation=False),
    "+mean": dict(phrase_representation=True, glance="mean", phrase_attention=False, transparent_attention=False),
    "+max": dict(phrase_representation=True, glance="max", phrase_attention=False, transparent_attention=False),
    "+max+attn": dict(phrase_representation=True, glance="max", phrase_attention=True, transparent_attention=False),
    "+max+attn+ta": dict(phrase_representation=True, glance="max", phrase_attention=True, transparent_attention=True),
}


def base_config(src_vocab, tgt_vocab, **kw):
    return ModelConfig(src_vocab, tgt_vocab, **kw)


def big_config(src_vocab, tgt_vocab, **kw):
    kw = {"d_model": 1024, "d_ffn": 4096, "n_heads": 16, "dropout": 0.3, **kw}
    return ModelConfig(src_vocab, tgt_vocab, **kw)


class AttentiveCombination(Module):
    """Cross-attend tokens to phrases, gate with the tokens, residual, layer norm."""

    def __init__(self, d_model, n_heads, rng, dropout=0.0, eps=1e-6, attention_dropout=0.0):
        self.mha = MultiHeadAttention(d_model, n_heads, rng, attention_dropout)
        self.w3 = Linear(2 * d_model, d_model, rng)
        self.w4 = Linear(d_model, d_model, rng)
        self.norm = LayerNorm(d_model, eps)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x, phrases, phrase_mask):
        return attentive_combination(x, phrases, phrase_mask, self)


def attentive_combination(x, phrases, phrase_mask, params):
    if phrases.shape[-2] == 0:
        raise ValueError("attentive combination needs at least one phrase")
    out_phrase = params.mha(x, phrases, phrases, phrase_mask)
    combined = params.w4(T.sigmoid(params.w3(T.concat([x, out_phrase], axis=-1))))
    return params.norm(x + params.drop(combined))


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        d, h, p, pa = cfg.d_model, cfg.n_heads, cfg.dropout, cfg.attention_dropout
        self.combiner = AttentiveCombination(d, h, rng, p, cfg.eps, pa) if cfg.phrase_representation else None
        self.self_attn = MultiHeadAttention(d, h, rng, pa)
        self.norm_self = LayerNorm(d, cfg.eps)
        self.ffn = FeedForward(d, cfg.d_ffn, rng, p)
        self.norm_ffn = LayerNorm(d, cfg.eps)
        self.drop = Dropout(p, rng)

    def __call__(self, x, token_mask, phrases=None, phrase_mask=None):
        if self.combiner is not None:
            x = self.combiner(x, phrases, phrase_mask)
        x = self.norm_self(x + self.drop(self.self_attn(x, x, x, token_mask)))
        return self.norm_ffn(x + self.drop(self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        d, h, p, pa = cfg.d_model, cfg.n_heads, cfg.dropout, cfg.attention_dropout
        self.self_attn = MultiHeadAttention(d, h, rng, pa)
        self.norm_self = LayerNorm(d, cfg.eps)
        self.combiner = AttentiveCombination(d, h, rng, p, cfg.eps, pa) if cfg.phrase_representation else None
        self.cross_attn = MultiHeadAttention(d, h, rng, pa)
        self.norm_cross = LayerNorm(d, cfg.eps)
        self.ffn = FeedForward(d, cfg.d_ffn, rng, p)
        self.norm_ffn = LayerNorm(d, cfg.eps)
        self.drop = Dropout(p, rng)

    def __call__(self, y, self_mask, memory, memory_mask, phrases=None, phrase_mask=None):
        y = self.norm_self(y + self.drop(self.self_attn(y, y, y, self_mask)))
        if self.combiner is not None:
            y = self.combiner(y, phrases, phrase_mask)
        y = self.norm_cross(y + self.drop(self.cross_attn(y, memory, memory, memory_mask)))
        return self.norm_ffn(y + self.drop(self.ffn(y)))


@dataclass
class EncoderState:
    """What the decoder needs from one encoder pass."""

    memory: Tensor
    memory_mask: AttentionMask
    levels: list = field(default_factory=list)
    phrases: list = field(default_factory=list)
    phrase_mask: AttentionMask | None = None
    src_valid: np.ndarray | None = None

    def select(self, rows):
        """Detached copy holding batch rows ``rows`` (for decoding)."""
        rows = np.asarray(rows)
        pick = lambda t: Tensor(t.data[rows])  # noqa: E731
        pm = None if self.phrase_mask is None else AttentionMask(self.phrase_mask.kind, self.phrase_mask.valid[rows])
        return EncoderState(
            pick(self.memory),
            AttentionMask(self.memory_mask.kind, self.memory_mask.valid[rows]),
            [pick(t) for t in self.levels],
            [pick(t) for t in self.phrases],
            pm,
            self.src_valid[rows],
        )


class PRTransformer(Module):
    """Encoder-decoder translation model; see :class:`ModelConfig` for the switches."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.rng = rng
        d = config.d_model
        self.src_embed = Embedding(config.src_vocab, d, rng)
        self.tgt_embed = Embedding(config.tgt_vocab, d, rng)
        table = sinusoidal_table(config.max_positions, d)
        self.positions = T.Parameter(table) if config.learned_positions else None
        self._table = table
        self.embed_drop = Dropout(config.dropout, rng)
        self.encoder = [EncoderLayer(config, rng) for _ in range(config.enc_layers)]
        self.decoder = [DecoderLayer(config, rng) for _ in range(config.dec_layers)]
        self.classifier = None if config.tie_target_classifier else Linear(d, config.tgt_vocab, rng, bias=False)
        pr = config.phrase_representation
        n_levels = config.n_phrase_levels
        self.scorers = [PhraseScorer(d, config.hidden, rng) for _ in range(n_levels)] if pr and config.phrase_attention else []
        self.transparent = TransparentWeights(n_levels, config.dec_layers) if pr and config.transparent_attention else None

    def _cast_buffers(self, dtype):
        self._table = sinusoidal_table(self.config.max_positions, self.config.d_model, dtype)

    def _pos(self):
        return self.positions if self.positions is not None else self._table

    def _embed(self, ids, table):
        return self.embed_drop(embed_and_position(ids, table.weight, self._pos(), np.sqrt(self.config.d_model)))

    def make_plan(self, src, trees=None):
        """N-gram (or tree) plans for a padded ``[B, L]`` source batch."""
        lengths = (np.asarray(src) != PAD).sum(axis=1)
        cfg = self.config
        plans = [
            plan_for(int(n), cfg.segmentation, None if trees is None else trees[i], cfg.strict_budget)
            for i, n in enumerate(lengths)
        ]
        return batch_plans(plans)

    def _phrases(self, level_input, plan, level):
        scorer = self.scorers[level] if self.scorers else None
        return phrase_sequence_for_level(level_input, plan, scorer, self.config.glance)

    def encode(self, src, plan=None):
        src = np.asarray(src)
        if src.ndim != 2:
            raise ValueError(f"source batch must be [batch, length], got shape {src.shape}")
        cfg = self.config
        valid = src != PAD
        mask = AttentionMask.padding(valid)
        x = self._embed(src, self.src_embed)
        levels = [x]
        phrases = []
        pmask = None
        if cfg.phrase_representation:
            if plan is None:
                plan = self.make_plan(src)
            if not isinstance(plan, BatchedPlan):
                raise TypeError("plan must be a BatchedPlan")
            if plan.index.shape[0] != src.shape[0]:
                raise ValueError("plan batch size does not match source batch")
            pmask = AttentionMask.padding(plan.phrase_valid)
        for k, layer in enumerate(self.encoder):
            if cfg.phrase_representation:
                phrases.append(self._phrases(x, plan, k))
                x = layer(x, mask, phrases[-1], pmask)
            else:
                x = layer(x, mask)
            levels.append(x)
        if cfg.phrase_representation and cfg.ta_levels == "io":
            phrases.append(self._phrases(x, plan, cfg.enc_layers))
        return EncoderState(x, mask, levels, phrases, pmask, valid)

    def decoder_phrases(self, state):
        if not self.config.phrase_representation:
            return [None] * self.config.dec_layers
        if self.transparent is None:
            return [state.phrases[-1]] * self.config.dec_layers
        w = self.transparent.weights()
        return [transparent_combine(state.phrases, j, self.transparent, w) for j in range(self.config.dec_layers)]

    def decode(self, state, tgt_in):
        """Logits ``[B, T, V]`` for decoder inputs ``tgt_in`` (starting with BOS)."""
        tgt_in = np.asarray(tgt_in)
        self_mask = AttentionMask.padding_causal(tgt_in != PAD)
        y = self._embed(tgt_in, self.tgt_embed)
        for layer, ph in zip(self.decoder, self.decoder_phrases(state)):
            y = layer(y, self_mask, state.memory, state.memory_mask, ph, state.phrase_mask)
        if self.classifier is None:
            return y @ T.transpose(self.tgt_embed.weight)
        return self.classifier(y)

    def __call__(self, src, tgt_in, plan=None):
        return self.decode(self.encode(src, plan), tgt_in)

    def forward_train(self, src, tgt, plan=None):
        """Teacher-forced logits; ``tgt`` holds target tokens ending in EOS, PAD-padded."""
        return self(src, shift_right(tgt), plan)


def shift_right(tgt):
    tgt = np.asarray(tgt)
    out = np.empty_like(tgt)
    out[:, 0] = BOS
    out[:, 1:] = tgt[:, :-1]
    return out


def _as_plan(model, src, plan):
    if plan is None or isinstance(plan, BatchedPlan):
        return plan
    return batch_plans([plan])


def _step_logprobs(model, state, prefixes):
    logits = model.decode(state, prefixes)
    lp = T.log_softmax(logits[:, -1]).data.astype(np.float64)
    lp[:, PAD] = -np.inf
    lp[:, BOS] = -np.inf
    return lp


def _max_len(model, src_len, max_len):
    cap = model.config.max_positions - 1
    return min(cap, max_len if max_len else src_len + 50)


@dataclass
class Hypothesis:
    tokens: list
    score: float
    finished: bool

    @property
    def output(self):
        """Tokens without the trailing EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def greedy_decode(model, src, plan=None, max_len=None):
    """Argmax decoding for each row of a padded ``[B, L]`` batch."""
    src = np.atleast_2d(np.asarray(src))
    with T.no_grad():
        was = model.training
        model.eval()
        try:
            state = model.encode(src, _as_plan(model, src, plan))
            b = src.shape[0]
            limit = _max_len(model, src.shape[1], max_len)
            prefixes = np.full((b, 1), BOS, dtype=np.int64)
            scores = np.zeros(b)
            done = np.zeros(b, dtype=bool)
            for _ in range(limit):
                lp = _step_logprobs(model, state, prefixes)
                tok = lp.argmax(axis=1)
                scores[~done] += lp[np.arange(b), tok][~done]
                tok = np.where(done, PAD, tok)
                prefixes = np.concatenate([prefixes, tok[:, None]], axis=1)
                done |= tok == EOS
                if done.all():
                    break
        finally:
            model.train(was)
    hyps = []
    for i in range(b):
        toks = [int(t) for t in prefixes[i, 1:] if t != PAD]
        hyps.append(Hypothesis(toks, float(scores[i]), bool(toks and toks[-1] == EOS)))
    return hyps


def beam_search(model, src, plan=None, beam_size=4, max_len=None):
    """Best hypothesis for one source sentence (1-D ids) by beam search.

    Scores are summed log-probabilities with no length normalization. Among
    equal scores, lower token ids win. A hypothesis finishing with EOS leaves
    the beam; the search ends when none are left alive, when the best finished
    score beats every live one, or at ``max_len`` tokens.
    """
    if beam_size < 1:
        raise ValueError(f"beam size must be positive, got {beam_size}")
    src = np.asarray(src).reshape(1, -1)
    vocab = model.config.tgt_vocab
    with T.no_grad():
        was = model.training
        model.eval()
        try:
            state = model.encode(src, _as_plan(model, src, plan))
            limit = _max_len(model, src.shape[1], max_len)
            alive = [([], 0.0)]
            finished = []
            for _ in range(limit):
                width = beam_size - len(finished)
                prefixes = np.array([[BOS] + toks for toks, _ in alive], dtype=np.int64)
                lp = _step_logprobs(model, state.select(np.zeros(len(alive), dtype=int)), prefixes)
                cand = (np.array([s for _, s in alive])[:, None] + lp).ravel()
                order = np.argsort(-cand, kind="stable")[:width]
                nxt = []
                for idx in order:
                    if not np.isfinite(cand[idx]):
                        break
                    row, tok = divmod(int(idx), vocab)
                    entry = (alive[row][0] + [tok], float(cand[idx]))
                    (finished if tok == EOS else nxt).append(entry)
                alive = nxt
                if not alive or len(finished) >= beam_size:
                    break
                if finished and max(s for _, s in finished) >= max(s for _, s in alive):
                    break
        finally:
            model.train(was)
    pool = [Hypothesis(t, s, True) for t, s in finished] + [Hypothesis(t, s, False) for t, s in alive]
    best = pool[0]
    for h in pool[1:]:
        if h.score > best.score:
            best = h
    return best


def score_sequence(model, src, tgt, plan=None):
    """Total log-probability of ``tgt`` (1-D ids, scored as given) given ``src``."""
    tgt = np.asarray(tgt, dtype=np.int64).ravel()
    if tgt.size == 0:
        raise ValueError("cannot score an empty target")
    src = np.asarray(src).reshape(1, -1)
    with T.no_grad():
        was = model.training
        model.eval()
        try:
            logits = model(src, shift_right(tgt[None]), _as_plan(model, src, plan))
        finally:
            model.train(was)
    lp = T.log_softmax(logits).data[0].astype(np.float64)
    return float(lp[np.arange(tgt.size), tgt].sum())


_GROUP_TOP = ("src_embed", "tgt_embed", "positions", "classifier", "scorers", "transparent")


def count_parameters(model):
    """Exact parameter counts per named group, plus ``"total"``.

    Groups drop layer indices: ``encoder.3.combiner.w3.weight`` counts under
    ``encoder.combiner``.
    """
    counts = {}
    for name, p in model.named_parameters():
        parts = [s for s in name.split(".") if not re.fullmatch(r"\d+", s)]
        key = parts[0] if parts[0] in _GROUP_TOP else ".".join(parts[:2])
        counts[key] = counts.get(key, 0) + int(p.size)
    counts["total"] = sum(counts.values())
    return counts
