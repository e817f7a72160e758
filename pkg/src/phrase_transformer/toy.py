"""Synthetic corpora for smoke runs."""

import numpy as np

from .training import SentencePair


def copy_corpus(n_pairs, n_symbols=50, min_len=5, max_len=40, seed=0):
    """Pairs whose target repeats the source; symbols are ``w0 .. w{n_symbols-1}``."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        toks = [f"w{j}" for j in rng.integers(0, n_symbols, size=n)]
        pairs.append(SentencePair(toks, list(toks), None, i + 1))
    return pairs
