"""Independent reference implementations used to cross-check the library.

These are deliberately naive: exhaustive enumeration, no dynamic programming.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


def collapse_path(path, blank=0):
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return tuple(out)


def brute_force_ctc(log_probs: np.ndarray, target, blank=0) -> float:
    """-log of the summed probability of every path that collapses to ``target``."""
    n_frames, n_vocab = log_probs.shape
    target = tuple(target)
    terms = [
        sum(log_probs[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(n_vocab), repeat=n_frames)
        if collapse_path(path, blank) == target
    ]
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(sum(math.exp(x - m) for x in terms)))


def min_edit_ops(ref, hyp):
    """Fewest substitutions + deletions + insertions, by exhaustive alignment search.

    An alignment is a choice of which reference words are kept and which
    hypothesis words are kept, with the kept words paired in order. Every
    unpaired reference word is a deletion, every unpaired hypothesis word an
    insertion, and every mismatched pair a substitution.
    """
    best = len(ref) + len(hyp)
    for k in range(min(len(ref), len(hyp)) + 1):
        for ri in itertools.combinations(range(len(ref)), k):
            for hi in itertools.combinations(range(len(hyp)), k):
                subs = sum(ref[a] != hyp[b] for a, b in zip(ri, hi))
                best = min(best, subs + (len(ref) - k) + (len(hyp) - k))
    return best


@lru_cache(maxsize=None)
def all_sequences(alphabet: tuple, max_len: int) -> tuple:
    return tuple(
        seq for n in range(max_len + 1) for seq in itertools.product(alphabet, repeat=n)
    )


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def min_edit_table(n_symbols: int, n: int, m: int):
    """Exhaustive minimal edit counts for every (ref, hyp) pair of lengths (n, m).

    Same search as :func:`min_edit_ops`, vectorized over all sequences of the
    given lengths. Returns ``(refs, hyps, table)`` with ``table[i, j]`` the
    count for ``refs[i]`` against ``hyps[j]``.
    """
    refs = np.array(list(itertools.product(range(n_symbols), repeat=n)), dtype=np.int8).reshape(n_symbols**n, n)
    hyps = np.array(list(itertools.product(range(n_symbols), repeat=m)), dtype=np.int8).reshape(n_symbols**m, m)
    best = np.full((len(refs), len(hyps)), n + m, dtype=np.int64)
    for k in range(1, min(n, m) + 1):
        for ri in itertools.combinations(range(n), k):
            for hi in itertools.combinations(range(m), k):
                subs = (refs[:, list(ri)][:, None, :] != hyps[:, list(hi)][None, :, :]).sum(-1)
                np.minimum(best, subs + (n - k) + (m - k), out=best)
    return refs, hyps, best
