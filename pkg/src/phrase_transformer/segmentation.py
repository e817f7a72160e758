"""Phrase segmentation of source sentences.

Two strategies produce a :class:`PhrasePlan`: fixed-length N-gram chunks whose
width depends on sentence length, and phrases extracted from a bracketed
constituency tree. :func:`batch_plans` pads a list of plans into rectangular
index grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

PAD_SLOT = -1


class TreeFormatError(ValueError):
    """Malformed bracketed tree; ``offset`` is the character position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class PhrasePlan:
    """Phrase layout of one sentence.

    ``index_grid[i, j]`` is the token position in slot ``j`` of phrase ``i``,
    or ``PAD_SLOT``; ``valid`` marks the real slots.
    """

    index_grid: np.ndarray
    valid: np.ndarray = field(init=False)

    def __post_init__(self):
        self.index_grid = np.asarray(self.index_grid, dtype=np.int64)
        self.valid = self.index_grid != PAD_SLOT

    @property
    def n_phrases(self):
        return self.index_grid.shape[0]

    @property
    def slot_width(self):
        return self.index_grid.shape[1]

    @property
    def seql(self):
        return int(self.valid.sum())

    def phrases(self):
        """Token positions of each phrase, PAD removed."""
        return [row[row != PAD_SLOT].tolist() for row in self.index_grid]

    @classmethod
    def from_phrases(cls, phrases, slot_width=None):
        width = max(len(p) for p in phrases) if slot_width is None else slot_width
        grid = np.full((len(phrases), width), PAD_SLOT, dtype=np.int64)
        for i, p in enumerate(phrases):
            if not p or len(p) > width:
                raise ValueError(f"phrase {i} has {len(p)} tokens; slot width is {width}")
            grid[i, : len(p)] = p
        return cls(grid)


def ntok_for_length(seql):
    """Tokens per N-gram phrase: ``max(min(8, seql // 6), 3)``."""
    if seql < 1:
        raise ValueError(f"sentence length must be positive, got {seql}")
    return max(min(8, seql // 6), 3)


def segment_ngram(seql):
    width = ntok_for_length(seql)
    n = -(-seql // width)
    grid = np.full(n * width, PAD_SLOT, dtype=np.int64)
    grid[:seql] = np.arange(seql)
    return PhrasePlan(grid.reshape(n, width))


# trees


class ParseTree:
    """Constituency tree node. Leaves carry a ``token``; inner nodes carry ``children``."""

    __slots__ = ("label", "children", "token")

    def __init__(self, label, children=None, token=None):
        if (children is None) == (token is None):
            raise ValueError("a tree node has either children or a token, not both")
        if children is not None and not children:
            raise ValueError(f"constituent {label!r} has no children")
        self.label = label
        self.children = list(children) if children is not None else None
        self.token = token

    @property
    def is_leaf(self):
        return self.token is not None

    def leaves(self):
        out = []
        stack = [self]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node.token)
            else:
                stack.extend(reversed(node.children))
        return out

    def __len__(self):
        return len(self.leaves())

    def __eq__(self, other):
        if not isinstance(other, ParseTree):
            return NotImplemented
        return self.to_bracketed() == other.to_bracketed()

    def __repr__(self):
        return f"ParseTree({self.to_bracketed()!r})"

    def to_bracketed(self):
        if self.is_leaf:
            return f"({self.label} {self.token})"
        return f"({self.label} {' '.join(c.to_bracketed() for c in self.children)})"


def _lex(text):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            yield c, i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            yield text[i:j], i
            i = j


def parse_bracketed(text):
    """Parse one Penn-style tree such as ``(S (NP (D the) (N cat)) (V ran))``.

    A root bracket without a label, ``( (S ...) )``, is accepted and unwrapped.
    """
    toks = list(_lex(text))
    if not toks:
        raise TreeFormatError("empty input", 0)
    pos = 0

    def node():
        nonlocal pos
        if pos >= len(toks):
            raise TreeFormatError("unexpected end of input", len(text))
        tok, off = toks[pos]
        if tok != "(":
            raise TreeFormatError(f"expected '(' but found {tok!r}", off)
        pos += 1
        if pos >= len(toks):
            raise TreeFormatError("unbalanced brackets", len(text))
        label = ""
        if toks[pos][0] not in "()":
            label = toks[pos][0]
            pos += 1
        if pos >= len(toks):
            raise TreeFormatError("unbalanced brackets", len(text))
        tok, off2 = toks[pos]
        if tok == ")":
            raise TreeFormatError("empty constituent", off)
        if tok != "(":
            pos += 1
            if pos >= len(toks) or toks[pos][0] != ")":
                where = toks[pos][1] if pos < len(toks) else len(text)
                raise TreeFormatError("expected ')' after token", where)
            pos += 1
            return ParseTree(label or "X", token=tok)
        children = []
        while pos < len(toks) and toks[pos][0] == "(":
            children.append(node())
        if pos >= len(toks):
            raise TreeFormatError("unbalanced brackets", len(text))
        if toks[pos][0] != ")":
            raise TreeFormatError(f"unexpected token {toks[pos][0]!r}", toks[pos][1])
        pos += 1
        if not label and len(children) == 1:
            return children[0]
        return ParseTree(label or "X", children=children)

    tree = node()
    if pos != len(toks):
        raise TreeFormatError("trailing input after tree", toks[pos][1])
    return tree


def extract_phrases_from_tree(tree, n, strict_budget=False):
    """Chunk the leaves of ``tree`` into phrases of at most ``n`` tokens.

    Works from the right: take the largest subtree on the right edge with fewer
    than ``n`` tokens, then keep prepending the adjacent subtree at the same
    depth while the budget allows. By default the budget left after the first
    subtree is ``n - len(subtree)``; ``strict_budget=True`` restarts it at ``n``
    after the first subtree, which can yield phrases longer than ``n``.

    Returns phrases as lists of leaf positions, left to right.
    """
    if n < 2:
        raise ValueError(f"phrase size limit must be at least 2, got {n}")
    if not isinstance(tree, ParseTree):
        raise TypeError("expected a ParseTree")
    # Mutable copy: [children-or-None, leaf position, remaining leaf count].
    counter = itertools.count()

    def build(t):
        if t.is_leaf:
            return [None, next(counter), 1]
        kids = [build(c) for c in t.children]
        return [kids, None, sum(k[2] for k in kids)]

    root = build(tree)

    def spine():
        path = [root]
        while path[-1][0] is not None:
            path.append(path[-1][0][-1])
        return path

    def remove_last(path, depth):
        """Detach ``path[depth]`` and prune emptied ancestors."""
        removed = path[depth][2]
        for node in path[: depth + 1]:
            node[2] -= removed
        d = depth
        while d > 0:
            parent = path[d - 1]
            parent[0].pop()
            if parent[0]:
                break
            d -= 1

    def positions(node):
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x[0] is None:
                out.append(x[1])
            else:
                stack.extend(reversed(x[0]))
        return out

    phrases = []
    while root[2] > 0:
        path = spine()
        best = None
        for depth, node in enumerate(path):
            if node[2] < n and (best is None or node[2] > path[best][2]):
                best = depth
        st = path[best]
        p = positions(st)
        remove_last(path, best)
        dst = best
        mt = n if strict_budget else n - len(p)
        while mt > 0 and root[2] > 0:
            path = spine()
            if len(path) <= dst:
                break
            sta = path[dst]
            nsta = sta[2]
            if nsta > mt:
                break
            p = positions(sta) + p
            remove_last(path, dst)
            mt -= nsta
        phrases.append(p)
    phrases.reverse()
    return phrases


def plan_from_tree(tree, seql=None, strict_budget=False):
    n_leaves = len(tree)
    if seql is not None and seql != n_leaves:
        raise ValueError(f"tree has {n_leaves} leaves but the sentence has {seql} tokens")
    return PhrasePlan.from_phrases(
        extract_phrases_from_tree(tree, ntok_for_length(n_leaves), strict_budget)
    )


@dataclass
class BatchedPlan:
    """Phrase plans of a batch padded to ``[batch, max_phrases, max_slots]``.

    ``index`` holds token positions with padding mapped to position 0 so it
    can be used for gathering; ``slot_valid`` and ``phrase_valid`` say what is
    real.
    """

    index: np.ndarray
    slot_valid: np.ndarray
    phrase_valid: np.ndarray

    @property
    def shape(self):
        return self.index.shape

    def gather_mask(self):
        """Slot mask safe for pooling: empty phrase rows get slot 0 marked usable.

        Those rows are excluded downstream by ``phrase_valid``.
        """
        m = self.slot_valid.copy()
        m[..., 0] |= ~self.phrase_valid
        return m


def batch_plans(plans):
    if not plans:
        raise ValueError("batch_plans needs at least one plan")
    b = len(plans)
    p = max(pl.n_phrases for pl in plans)
    s = max(pl.slot_width for pl in plans)
    grid = np.full((b, p, s), PAD_SLOT, dtype=np.int64)
    for i, pl in enumerate(plans):
        grid[i, : pl.n_phrases, : pl.slot_width] = pl.index_grid
    slot_valid = grid != PAD_SLOT
    return BatchedPlan(np.where(slot_valid, grid, 0), slot_valid, slot_valid.any(axis=-1))


def plan_for(tokens_len, mode="ngram", tree=None, strict_budget=False):
    if mode == "ngram":
        return segment_ngram(tokens_len)
    if mode == "tree":
        if tree is None:
            raise ValueError("tree segmentation needs a parse tree")
        return plan_from_tree(tree, tokens_len, strict_budget)
    raise ValueError(f"unknown segmentation mode {mode!r}")
