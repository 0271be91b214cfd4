"""Character vocabulary, CTC loss (log-space forward-backward) and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import groupby
from typing import Sequence

import numpy as np
import torch

BLANK = "<b>"


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the available frames."""

    code = "ctc_infeasible"


class VocabError(ValueError):
    code = "out_of_vocabulary"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple = (BLANK,) + tuple("abcdefghijklmnopqrstuvwxyz") + (" ", "'")
    blank_index: int = 0

    def __post_init__(self):
        if self.tokens[self.blank_index] != BLANK or self.blank_index != 0:
            raise ValueError("blank must be token 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    @cached_property
    def _index(self):
        return {tok: i for i, tok in enumerate(self.tokens)}

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise VocabError(f"character {exc.args[0]!r} not in vocabulary (text {text!r})") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.blank_index)


VOCAB = Vocab()


def log_softmax(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    shifted = values - values.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class LogitLattice:
    """Unnormalized per-frame scores (T', |Vocab|)."""

    values: np.ndarray

    @cached_property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.values)

    def __len__(self):
        return self.values.shape[0]


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames able to emit ``target``: one per token plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_loss(lattice: LogitLattice | np.ndarray, target: Sequence[int], blank: int = 0):
    """Negative log-likelihood of ``target`` under the lattice, and its gradient.

    Parameters
    ----------
    lattice : LogitLattice or ndarray (T, V)
        Unnormalized logits; a per-frame log-softmax is applied internally.
    target : sequence of int
        Non-empty token ids, none equal to ``blank``.

    Returns
    -------
    loss : float
    grad : ndarray (T, V)
        d loss / d logits.
    """
    values = lattice.values if isinstance(lattice, LogitLattice) else np.asarray(lattice)
    target = [int(t) for t in target]
    if not target:
        raise CTCInfeasibleError("empty target")
    if blank in target:
        raise CTCInfeasibleError("target contains the blank token")
    n_frames = values.shape[0]
    if n_frames < min_frames(target):
        raise CTCInfeasibleError(
            f"{n_frames} frames cannot emit a {len(target)}-token target "
            f"(needs {min_frames(target)})"
        )
    lp = log_softmax(values)
    ext = _extend(target, blank)
    n_states = len(ext)
    # Skip transitions s-2 -> s are allowed into non-blank labels that differ from s-2.
    can_skip = np.zeros(n_states, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg_inf = -np.inf

    emit = lp[:, ext]  # (T, S)
    alpha = np.full((n_frames, n_states), neg_inf)
    alpha[0, :2] = emit[0, :2]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        step = np.concatenate(([neg_inf], prev[:-1]))
        skip = np.where(can_skip, np.concatenate(([neg_inf, neg_inf], prev[:-2])), neg_inf)
        alpha[t] = _logsumexp3(prev, step, skip) + emit[t]

    # beta[t, s]: log-prob of finishing from state s at t, excluding emission at t.
    beta = np.full((n_frames, n_states), neg_inf)
    beta[-1, -2:] = 0.0
    skip_from = np.zeros(n_states, dtype=bool)
    skip_from[:-2] = can_skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        step = np.concatenate((nxt[1:], [neg_inf]))
        skip = np.where(skip_from, np.concatenate((nxt[2:], [neg_inf, neg_inf])), neg_inf)
        beta[t] = _logsumexp3(nxt, step, skip)

    log_likelihood = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    occupancy = np.exp(alpha + beta - log_likelihood)  # (T, S)
    label_posterior = np.zeros_like(lp)
    for s in range(n_states):
        label_posterior[:, ext[s]] += occupancy[:, s]
    grad = np.exp(lp) - label_posterior
    # rounding can push a probability-1 alignment a hair above log 1
    return max(0.0, float(-log_likelihood)), grad


def collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    return [tok for tok, _ in groupby(path) if tok != blank]


def greedy_path(lattice: LogitLattice | np.ndarray) -> np.ndarray:
    values = lattice.values if isinstance(lattice, LogitLattice) else np.asarray(lattice)
    # np.argmax returns the first maximum, i.e. the lowest token index on ties
    return np.argmax(values, axis=-1)


def ctc_greedy_decode(lattice: LogitLattice | np.ndarray, vocab: Vocab = VOCAB) -> str:
    return vocab.decode(collapse(greedy_path(lattice).tolist(), vocab.blank_index))


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target):
        loss, grad = ctc_loss(logits.detach().cpu().double().numpy(), target)
        ctx.save_for_backward(torch.from_numpy(grad).to(logits.dtype))
        return logits.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None


def ctc_loss_torch(logits: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """Differentiable CTC loss for one utterance's logits (T', V)."""
    return _CTCFunction.apply(logits, tuple(int(t) for t in target))
