"""Corpus loading, batching and the optimization loop."""

from __future__ import annotations

import csv
import logging
import os
import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, atomic_write_bytes, encode, params_of, read_checkpoint, save_checkpoint
from .model import BOS, EOS, PAD, UNK, greedy_decode
from .segmentation import batch_plans, parse_bracketed, plan_for

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class Vocab:
    """Token <-> id map with ``<pad>=0, <s>=1, </s>=2, <unk>=3`` reserved."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise ValueError("vocabulary has duplicate tokens")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out


def build_vocab(corpus, max_size=None):
    """Frequency-ordered vocabulary; equal counts keep first-occurrence order."""
    counts = Counter()
    for sent in corpus:
        counts.update(sent)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: -counts[t])  # sorted() is stable; Counter keeps insertion order
    ranked = [t for t in ranked if t not in RESERVED]
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(RESERVED))]
    return Vocab(list(RESERVED) + ranked)


@dataclass
class SentencePair:
    src: list
    tgt: list
    tree: object = None
    line: int = 0


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from exc


def load_parallel(src_path, tgt_path, tree_path=None, max_len=256):
    """Line-aligned sentence pairs with both sides non-empty and at most ``max_len`` tokens."""
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line count mismatch: {src_path} has {len(src_lines)} lines, {tgt_path} has {len(tgt_lines)}"
        )
    tree_lines = None
    if tree_path is not None:
        tree_lines = _read_lines(tree_path)
        if len(tree_lines) != len(src_lines):
            raise DataError(
                f"line count mismatch: {tree_path} has {len(tree_lines)} lines, {src_path} has {len(src_lines)}"
            )
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        lineno = i + 1
        src, tgt = s.split(), t.split()
        tree = None
        if tree_lines is not None and src:
            try:
                tree = parse_bracketed(tree_lines[i])
            except ValueError as exc:
                raise DataError(f"{tree_path}:{lineno}: {exc}") from exc
            if tree.leaves() != src:
                raise DataError(
                    f"{tree_path}:{lineno}: tree has {len(tree)} leaves that do not match the {len(src)} source tokens"
                )
        if not src or not tgt or len(src) > max_len or len(tgt) > max_len:
            continue
        pairs.append(SentencePair(src, tgt, tree, lineno))
    return pairs


@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    plan: object
    n_tokens: int
    indices: list = field(default_factory=list)


def collate(pairs, src_vocab, tgt_vocab, segmentation="ngram", strict_budget=False, phrases=True):
    """Padded id arrays; targets end in EOS. Builds phrase plans when ``phrases``."""
    b = len(pairs)
    ls = max(len(p.src) for p in pairs)
    lt = max(len(p.tgt) for p in pairs) + 1
    src = np.full((b, ls), PAD, dtype=np.int64)
    tgt = np.full((b, lt), PAD, dtype=np.int64)
    for i, p in enumerate(pairs):
        src[i, : len(p.src)] = src_vocab.encode(p.src)
        ids = tgt_vocab.encode(p.tgt) + [EOS]
        tgt[i, : len(ids)] = ids
    plan = None
    if phrases:
        plan = batch_plans([plan_for(len(p.src), segmentation, p.tree, strict_budget) for p in pairs])
    return Batch(src, tgt, plan, int((tgt != PAD).sum()))


def make_batches(pairs, tokens_per_batch, seed, epoch, accumulation=1):
    """Effective batches (lists of micro-batches of pair indices) for one epoch.

    Order is shuffled by ``(seed, epoch)``. Pairs are length-sorted inside
    shuffled pools so micro-batches hold similar lengths; a micro-batch holds up
    to ``tokens_per_batch / accumulation`` target tokens, and micro-batches are
    grouped until a group reaches ``tokens_per_batch`` tokens. Only the last
    group of the epoch may fall short.
    """
    n = len(pairs)
    if n == 0:
        return []
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    cost = np.array([len(p.tgt) + 1 for p in pairs])
    micro_cap = max(1, -(-tokens_per_batch // max(1, accumulation)))
    pool = max(1, 50 * max(1, micro_cap // max(1, int(cost.mean()))))
    micro = []
    for start in range(0, n, pool):
        chunk = sorted(order[start : start + pool], key=lambda i: (len(pairs[i].src), cost[i]))
        cur, cur_tok = [], 0
        for i in chunk:
            if cur and cur_tok + cost[i] > micro_cap:
                micro.append(cur)
                cur, cur_tok = [], 0
            cur.append(int(i))
            cur_tok += cost[i]
        if cur:
            micro.append(cur)
    micro = [micro[i] for i in rng.permutation(len(micro))]
    batches, group, tok = [], [], 0
    for mb in micro:
        group.append(mb)
        tok += int(cost[mb].sum())
        if tok >= tokens_per_batch:
            batches.append(group)
            group, tok = [], 0
    if group:
        batches.append(group)
    return batches


def lr_at_step(step, d_model, warmup, scale=1.0):
    """``scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def label_smoothed_loss(logits, targets, smoothing=0.1, pad_mask=None, reduction="mean"):
    """Cross-entropy against ``(1 - smoothing) * onehot + smoothing / V``; PAD excluded.

    ``pad_mask`` is true at positions to ignore (defaults to ``targets == PAD``).
    ``reduction="sum"`` returns the token sum instead of the per-token mean.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    ignore = targets == PAD if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    keep = (~ignore).astype(logits.dtype)
    n = keep.sum()
    if n == 0:
        raise ValueError("every target position is padding")
    v = logits.shape[-1]
    q = np.full(logits.shape, smoothing / v, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], (1.0 - smoothing) + smoothing / v, axis=-1)
    q *= keep[..., None]
    total = -(T.log_softmax(logits) * q).sum()
    return total if reduction == "sum" else total * (1.0 / n)


class Adam:
    """Adam with ``beta1=0.9, beta2=0.98, eps=1e-9``; the learning rate is set per step."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps=1e-9):
        self.params = dict(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def hyperparameters(self):
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step_count}

    def moments(self):
        return {k: (self.m[k], self.v[k]) for k in self.params}

    def load(self, hyper, tensors):
        self.step_count = int(hyper.get("step", 0))
        for k in self.params:
            if f"adam_m/{k}" in tensors:
                self.m[k] = tensors[f"adam_m/{k}"].astype(self.m[k].dtype)
                self.v[k] = tensors[f"adam_v/{k}"].astype(self.v[k].dtype)


@dataclass
class StepMetrics:
    step: int
    loss: float
    accuracy: float
    lr: float
    tokens: int
    tokens_per_sec: float


def train_step(model, micro_batches, optimizer, lr, smoothing=0.1, step=0):
    """One optimizer update from gradients accumulated over ``micro_batches``.

    Each micro-batch contributes its token-summed loss divided by the token
    count of the whole group, so the update equals one large batch.
    """
    t0 = time.perf_counter()
    total = sum(mb.n_tokens for mb in micro_batches)
    model.zero_grad()
    loss_sum = 0.0
    correct = 0
    for i, mb in enumerate(micro_batches):
        logits = model.forward_train(mb.src, mb.tgt, mb.plan)
        loss = label_smoothed_loss(logits, mb.tgt, smoothing, reduction="sum")
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}, micro-batch {i} (pairs {mb.indices[:8]})")
        (loss * (1.0 / total)).backward()
        loss_sum += value
        mask = mb.tgt != PAD
        correct += int(((logits.data.argmax(-1) == mb.tgt) & mask).sum())
    optimizer.step(lr)
    dt = time.perf_counter() - t0
    return StepMetrics(step, loss_sum / total, correct / total, lr, total, total / dt if dt > 0 else 0.0)


@dataclass
class TrainConfig:
    warmup: int = 400
    tokens_per_batch: int = 1024
    accumulation: int = 1
    max_len: int = 256
    label_smoothing: float = 0.1
    steps: int = 2000
    checkpoint_interval: int = 500
    keep_checkpoints: int = 5
    seed: int = 1
    lr_scale: float = 1.0
    log_interval: int = 50
    deterministic: bool = False


class _Prefetcher:
    """Collates batches on a worker thread through a bounded queue."""

    _END = object()

    def __init__(self, source, depth=4):
        self.q = queue.Queue(maxsize=depth)
        self.error = None
        self.thread = threading.Thread(target=self._run, args=(source,), daemon=True)
        self.thread.start()

    def _run(self, source):
        try:
            for item in source:
                self.q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            self.error = exc
        self.q.put(self._END)

    def __iter__(self):
        while True:
            item = self.q.get()
            if item is self._END:
                if self.error is not None:
                    raise self.error
                return
            yield item


class Trainer:
    """Runs the training loop, writing checkpoints and a CSV metrics log."""

    def __init__(self, model, pairs, src_vocab, tgt_vocab, config, out_dir=None, extra_meta=None):
        self.model = model
        self.pairs = pairs
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.cfg = config
        self.out_dir = out_dir
        self.extra_meta = extra_meta or {}
        self.optimizer = Adam(model.named_parameters())
        self.history = []
        self.checkpoints = []
        self.step = 0
        self.epoch = 0
        self.metrics_path = None

    def _collate(self, group):
        mc = self.model.config
        out = []
        for idx in group:
            b = collate(
                [self.pairs[i] for i in idx], self.src_vocab, self.tgt_vocab,
                mc.segmentation, mc.strict_budget, mc.phrase_representation,
            )
            b.indices = idx
            out.append(b)
        return out

    def batches(self):
        """Endless stream of collated effective batches, epoch after epoch."""
        while True:
            groups = make_batches(self.pairs, self.cfg.tokens_per_batch, self.cfg.seed, self.epoch, self.cfg.accumulation)
            if not groups:
                raise DataError("no training pairs")
            for g in groups:
                yield self._collate(g)
            self.epoch += 1

    def meta(self):
        return {
            "src_vocab": self.src_vocab.itos,
            "tgt_vocab": self.tgt_vocab.itos,
            "step": self.step,
            **self.extra_meta,
        }

    def save(self):
        path = os.path.join(self.out_dir, f"checkpoint_{self.step:07d}.prt")
        save_checkpoint(path, self.model, self.optimizer, self.meta())
        self.checkpoints.append(path)
        return path

    def run(self, steps=None, on_step=None):
        """Train for ``steps`` updates. ``on_step(metrics)`` returning True stops early."""
        cfg = self.cfg
        steps = cfg.steps if steps is None else steps
        stream = self.batches()
        if not cfg.deterministic:
            stream = _Prefetcher(stream)
        self.model.train()
        metrics_file = None
        writer = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            self.metrics_path = os.path.join(self.out_dir, "metrics.csv")
            metrics_file = open(self.metrics_path + ".partial", "w", newline="")
            writer = csv.writer(metrics_file)
            writer.writerow(["step", "loss", "accuracy", "lr", "tokens", "tokens_per_sec"])
        try:
            for group in stream:
                if self.step >= steps:
                    break
                self.step += 1
                lr = lr_at_step(self.step, self.model.config.d_model, cfg.warmup, cfg.lr_scale)
                m = train_step(self.model, group, self.optimizer, lr, cfg.label_smoothing, self.step)
                self.history.append(m)
                if writer:
                    writer.writerow([m.step, f"{m.loss:.6f}", f"{m.accuracy:.6f}", f"{m.lr:.8g}", m.tokens, f"{m.tokens_per_sec:.1f}"])
                if cfg.log_interval and self.step % cfg.log_interval == 0:
                    log.info("step %d loss %.4f acc %.3f lr %.3g", m.step, m.loss, m.accuracy, m.lr)
                stop = bool(on_step(m)) if on_step else False
                if self.out_dir and cfg.checkpoint_interval and (
                    self.step % cfg.checkpoint_interval == 0 or stop or self.step == steps
                ):
                    self.save()
                if stop:
                    break
        except BaseException:
            if metrics_file:
                metrics_file.close()
                os.unlink(metrics_file.name)
            raise
        if metrics_file:
            metrics_file.close()
            os.replace(metrics_file.name, self.metrics_path)
        return self.history


def token_accuracy(model, pairs, src_vocab, tgt_vocab, batch_size=64, max_extra=10):
    """Fraction of reference positions (EOS included) that greedy decoding reproduces."""
    correct = total = 0
    mc = model.config
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        b = collate(chunk, src_vocab, tgt_vocab, mc.segmentation, mc.strict_budget, mc.phrase_representation)
        limit = b.tgt.shape[1] + max_extra
        hyps = greedy_decode(model, b.src, b.plan, max_len=limit)
        for h, ref in zip(hyps, b.tgt):
            ref = ref[ref != PAD]
            out = np.array(h.tokens[: len(ref)])
            correct += int((out == ref[: len(out)]).sum())
            total += len(ref)
    return correct / max(total, 1)


def average_checkpoints(paths):
    """Element-wise mean of the parameters of several checkpoints.

    Returns ``(meta, params)`` where ``meta`` is the first checkpoint's header
    without optimizer state.
    """
    paths = list(paths)
    if not paths:
        raise CheckpointError("average_checkpoints needs at least one checkpoint")
    meta0, tensors0 = read_checkpoint(paths[0])
    ref = params_of(tensors0)
    echo = _echo(meta0)
    sums = {k: v.astype(np.float64) for k, v in ref.items()}
    for path in paths[1:]:
        meta, tensors = read_checkpoint(path)
        if _echo(meta) != echo:
            raise CheckpointError(f"{path}: config does not match {paths[0]}")
        params = params_of(tensors)
        if set(params) != set(ref):
            raise CheckpointError(f"{path}: tensor names differ from {paths[0]}")
        for k, v in params.items():
            if v.shape != ref[k].shape:
                raise CheckpointError(f"{path}: tensor {k} has shape {v.shape}, expected {ref[k].shape}")
            sums[k] += v
    n = len(paths)
    averaged = {k: (s / n).astype(np.float32) for k, s in sums.items()}
    meta = {k: v for k, v in meta0.items() if k != "optimizer"}
    meta["averaged_from"] = [os.path.basename(p) for p in paths]
    return meta, averaged


def _echo(meta):
    return {k: meta.get(k) for k in ("model", "src_vocab", "tgt_vocab")}


def write_averaged(path, meta, params):
    atomic_write_bytes(path, encode(meta, {f"param/{k}": v for k, v in params.items()}))
