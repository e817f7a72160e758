"""Corpus BLEU, length-bucketed BLEU and contrastive-pair accuracy."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field


class EvaluationError(ValueError):
    pass


@dataclass
class BleuReport:
    score: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self):
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.score:.2f}, {p} (BP={self.brevity_penalty:.3f}, "
            f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tok(s):
    return s.split() if isinstance(s, str) else list(s)


def bleu_stats(candidates, references, max_n=4):
    """Summed clipped matches and totals per order, plus hypothesis/reference lengths."""
    candidates = list(candidates)
    references = list(references)
    if len(candidates) != len(references):
        raise EvaluationError(f"{len(candidates)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for c, r in zip(candidates, references):
        c, r = _tok(c), _tok(r)
        hyp_len += len(c)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in hc.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(candidates, references, max_n=4):
    """Case-sensitive corpus BLEU over whitespace tokens, single reference, no smoothing."""
    candidates = list(candidates)
    if not candidates:
        raise EvaluationError("BLEU needs at least one sentence")
    matches, totals, hyp_len, ref_len = bleu_stats(candidates, references, max_n)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


DEFAULT_BOUNDARIES = (0, 15, 30, 45)


@dataclass
class LengthBucket:
    low: int
    high: float
    count: int
    bleu: BleuReport

    @property
    def label(self):
        return f"[{self.low},{'inf' if math.isinf(self.high) else int(self.high)})"


@dataclass
class LengthBucketReport:
    boundaries: tuple
    buckets: list = field(default_factory=list)

    @property
    def total(self):
        return sum(b.count for b in self.buckets)

    def table(self):
        lines = [f"{'bucket':<12}{'sentences':>10}{'BLEU':>8}"]
        lines += [f"{b.label:<12}{b.count:>10}{b.bleu.score:>8.2f}" for b in self.buckets]
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["low", "high", "sentences", "bleu"])
        for b in self.buckets:
            w.writerow([b.low, "inf" if math.isinf(b.high) else int(b.high), b.count, f"{b.bleu.score:.4f}"])
        return buf.getvalue()


def length_buckets(sources, hypotheses, references, boundaries=DEFAULT_BOUNDARIES):
    """Corpus BLEU per source-length bucket ``[b_i, b_{i+1})``; the last bucket is open.

    Buckets with no sentences are left out.
    """
    boundaries = tuple(int(b) for b in boundaries)
    if not boundaries or any(b >= c for b, c in zip(boundaries, boundaries[1:])):
        raise EvaluationError(f"bucket boundaries must be strictly increasing, got {boundaries}")
    sources, hypotheses, references = list(sources), list(hypotheses), list(references)
    if not len(sources) == len(hypotheses) == len(references):
        raise EvaluationError("sources, hypotheses and references differ in length")
    edges = list(boundaries) + [math.inf]
    groups = [[] for _ in boundaries]
    for i, s in enumerate(sources):
        n = len(_tok(s))
        for k in range(len(boundaries)):
            if edges[k] <= n < edges[k + 1]:
                groups[k].append(i)
                break
    report = LengthBucketReport(boundaries)
    for k, idx in enumerate(groups):
        if idx:
            rep = bleu([hypotheses[i] for i in idx], [references[i] for i in idx])
            report.buckets.append(LengthBucket(edges[k], edges[k + 1], len(idx), rep))
    return report


@dataclass
class ContrastivePair:
    source: str
    reference: str
    contrastive: str
    distance: int | None = None

    def __post_init__(self):
        if self.reference == self.contrastive:
            raise EvaluationError("reference and contrastive translation are identical")


def read_contrastive(path):
    """Tab-separated ``source, reference, contrastive[, distance]`` lines."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise EvaluationError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(cols)}")
            dist = None
            if len(cols) == 4 and cols[3].strip():
                try:
                    dist = int(cols[3])
                except ValueError as exc:
                    raise EvaluationError(f"{path}:{lineno}: distance {cols[3]!r} is not an integer") from exc
            try:
                pairs.append(ContrastivePair(cols[0], cols[1], cols[2], dist))
            except EvaluationError as exc:
                raise EvaluationError(f"{path}:{lineno}: {exc}") from exc
    return pairs


@dataclass
class ContrastiveReport:
    accuracy: float
    correct: int
    total: int
    by_distance: dict = field(default_factory=dict)

    def table(self):
        lines = [f"accuracy {self.accuracy:.4f} ({self.correct}/{self.total})"]
        if self.by_distance:
            lines.append(f"{'distance':>8}{'correct':>9}{'total':>7}{'accuracy':>10}")
            for d, (c, n) in sorted(self.by_distance.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)):
                lines.append(f"{'-' if d is None else d:>8}{c:>9}{n:>7}{c / n:>10.4f}")
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["distance", "correct", "total", "accuracy"])
        for d, (c, n) in sorted(self.by_distance.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)):
            w.writerow(["" if d is None else d, c, n, f"{c / n:.6f}"])
        w.writerow(["all", self.correct, self.total, f"{self.accuracy:.6f}"])
        return buf.getvalue()


def contrastive_accuracy(scorer, pairs):
    """Share of pairs where ``scorer(source, reference) > scorer(source, contrastive)``.

    Ties count as wrong. ``by_distance`` maps each distance annotation (None
    when absent) to ``(correct, total)``.
    """
    correct = 0
    by = {}
    pairs = list(pairs)
    for i, p in enumerate(pairs):
        try:
            good = scorer(p.source, p.reference) > scorer(p.source, p.contrastive)
        except Exception as exc:
            raise EvaluationError(f"scorer failed on pair {i} ({p.source[:40]!r}): {exc}") from exc
        correct += good
        c, n = by.get(p.distance, (0, 0))
        by[p.distance] = (c + int(good), n + 1)
    total = len(pairs)
    return ContrastiveReport(correct / total if total else 0.0, correct, total, by)
