"""CTC machinery: collapse, forward DP, greedy alignment, confidence masking.

Label columns of a CTC log-prob matrix are the content vocabulary plus one
blank column. Unless told otherwise, the blank is the *last* column, so
argmax ties (which resolve to the lowest index) never favour the blank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import NumericError, Tensor, as_tensor, concat, logsumexp, matmul, stack, where

NEG_INF = -np.inf


@dataclass
class Alignment:
    labels: list[int]
    frame_log_probs: list[float]


@dataclass
class TokenConfidence:
    """Greedy CTC output: tokens, their confidences and source frame runs.

    ``runs[l]`` is the half-open frame interval the l-th token came from.
    """

    tokens: list[int]
    confidences: list[float]
    runs: list[tuple[int, int]]
    alignment: Alignment | None = None


@dataclass
class MaskedSequence:
    tokens: list[int]
    masked_positions: list[int]
    original_length: int
    mask_id: int | None = None
    original_tokens: list[int] = field(default_factory=list)


def _blank_of(num_labels: int, blank: int | None) -> int:
    return num_labels - 1 if blank is None else blank


def collapse(labels: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for a in labels:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames any alignment of ``target`` can have."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(num_frames: int, target: Sequence[int]) -> bool:
    return num_frames >= min_frames(target)


def ctc_log_prob_batch(
    lp: Tensor,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int | None = None,
) -> Tensor:
    """log P(Y_b | X_b) for every batch item, differentiable w.r.t. ``lp``.

    ``lp`` is ``[B, T, C]`` per-frame log-probabilities; frames at or past
    ``lengths[b]`` are ignored. Infeasible targets give ``-inf``.
    """
    lp = as_tensor(lp)
    if np.isnan(lp.data).any():
        raise NumericError("ctc_log_prob: NaN in log-probabilities")
    B, T, C = lp.shape
    blank = _blank_of(C, blank)
    dtype = lp.dtype
    lengths = np.asarray(lengths, dtype=np.int64)
    tlens = np.array([len(y) for y in targets], dtype=np.int64)
    S = 2 * int(tlens.max(initial=0)) + 1

    ext = np.full((B, S), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1 : 2 * len(y) : 2] = y
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]
    skip_bias = np.where(skip, 0.0, NEG_INF).astype(dtype)

    onehot = np.zeros((B, C, S), dtype=dtype)
    onehot[np.arange(B)[:, None], ext, np.arange(S)[None, :]] = 1.0
    emit = matmul(lp, Tensor(onehot))  # [B, T, S]

    init = np.full((S,), NEG_INF, dtype=dtype)
    init[: min(2, S)] = 0.0
    alpha = emit[:, 0, :] + Tensor(init)
    pad1 = Tensor(np.full((B, 1), NEG_INF, dtype=dtype))
    pad2 = Tensor(np.full((B, 2), NEG_INF, dtype=dtype))
    for t in range(1, T):
        cands = [alpha]
        if S > 1:
            cands.append(concat([pad1, alpha[:, :-1]], axis=1))
        if S > 2:
            cands.append(concat([pad2, alpha[:, :-2]], axis=1) + Tensor(skip_bias))
        new = logsumexp(stack(cands, axis=-1), axis=-1) + emit[:, t, :]
        alpha = where((t < lengths)[:, None], new, alpha)

    rows = np.arange(B)
    last = alpha[rows, 2 * tlens]
    prev = alpha[rows, np.maximum(2 * tlens - 1, 0)]
    prev = where(tlens > 0, prev, Tensor(np.full((B,), NEG_INF, dtype=dtype)))
    out = logsumexp(stack([last, prev], axis=-1), axis=-1)
    infeasible = np.array([not is_feasible(int(n), y) for n, y in zip(lengths, targets)])
    if infeasible.any():
        out = where(~infeasible, out, Tensor(np.full((B,), NEG_INF, dtype=dtype)))
    return out


def ctc_log_prob(lp, target: Sequence[int], blank: int | None = None) -> Tensor:
    """log of the summed probability of all alignments that collapse to ``target``.

    ``lp`` is a ``[T, C]`` array or Tensor of per-frame log-probabilities.
    Returns a scalar Tensor; ``-inf`` when no alignment fits in T frames.
    """
    lp = as_tensor(lp)
    T = lp.shape[0]
    out = ctc_log_prob_batch(lp.reshape(1, *lp.shape), [T], [list(target)], blank)
    return out.reshape(())


def best_path(lp: np.ndarray) -> Alignment:
    lp = lp.data if isinstance(lp, Tensor) else np.asarray(lp)
    labels = lp.argmax(axis=-1)
    winning = lp[np.arange(lp.shape[0]), labels]
    return Alignment(labels=[int(a) for a in labels], frame_log_probs=[float(v) for v in winning])


def ctc_greedy(lp, blank: int | None = None) -> TokenConfidence:
    """Best-path decode with one confidence per emitted token.

    A token's confidence is the highest frame probability within the run
    of identical non-blank argmax frames it was collapsed from.
    """
    lp = lp.data if isinstance(lp, Tensor) else np.asarray(lp)
    blank = _blank_of(lp.shape[-1], blank)
    ali = best_path(lp)
    tokens: list[int] = []
    confs: list[float] = []
    runs: list[tuple[int, int]] = []
    start = None
    for t, a in enumerate(ali.labels + [None]):
        if start is not None and a != ali.labels[start]:
            tokens.append(ali.labels[start])
            confs.append(float(np.exp(max(ali.frame_log_probs[start:t]))))
            runs.append((start, t))
            start = None
        if start is None and a is not None and a != blank:
            start = t
    return TokenConfidence(tokens=tokens, confidences=confs, runs=runs, alignment=ali)


def mask_by_confidence(tc: TokenConfidence, p_thres: float, mask_id: int | None = None) -> MaskedSequence:
    """Mask every token whose confidence is strictly below ``p_thres``."""
    if not 0.0 <= p_thres <= 1.0:
        raise ValueError(f"p_thres must lie in [0, 1], got {p_thres}")
    masked = [i for i, c in enumerate(tc.confidences) if c < p_thres]
    tokens = list(tc.tokens)
    if mask_id is not None:
        for i in masked:
            tokens[i] = mask_id
    return MaskedSequence(
        tokens=tokens,
        masked_positions=masked,
        original_length=len(tokens),
        mask_id=mask_id,
        original_tokens=list(tc.tokens),
    )
