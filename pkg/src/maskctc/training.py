"""Objectives, random masking and the Adam/warmup optimizer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .ctc import ctc_log_prob_batch, is_feasible
from .model import MODEL_TYPES, MaskCTCModel, ModelParams
from .numerics import NumericError, Rng, Tensor, as_tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class SkipUtterance(Exception):
    """Nothing to mask: the utterance should be skipped."""


@dataclass
class TrainConfig:
    model_type: str = "maskctc"
    lambda_ar: float = 0.3
    gamma_nar: float = 0.3
    epochs: int = 35
    batch_size: int = 32
    lr_peak: float = 3e-3
    warmup_steps: int = 400
    seed: int = 1
    grad_clip: float = 5.0
    label_smoothing: float = 0.0
    keep_last: int = 10
    average_top: int = 5

    def __post_init__(self):
        if self.model_type not in MODEL_TYPES:
            raise ConfigError(f"model_type must be one of {MODEL_TYPES}, got {self.model_type!r}")
        for name in ("lambda_ar", "gamma_nar"):
            w = getattr(self, name)
            if not 0.0 <= w <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {w}")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ConfigError("epochs, batch_size and warmup_steps must be positive")


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


# losses -----------------------------------------------------------------------


def _check_weight(w: float, name: str) -> None:
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {w}")


def _target_log_probs(logits: Tensor, Y: Sequence[int]) -> Tensor:
    if logits.ndim != 2 or logits.shape[0] != len(Y):
        raise ValueError(f"length mismatch: log-probs {logits.shape} vs {len(Y)} targets")
    return logits[np.arange(len(Y)), np.asarray(Y, dtype=np.int64)]


def att_loss(logits: Tensor, Y: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``Y`` under teacher-forced log-probs ``[L, C]``."""
    return -_target_log_probs(as_tensor(logits), Y).mean()


def cmlm_loss(logits: Tensor, Y: Sequence[int], masked_positions: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the original tokens at masked positions only."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(Y):
        raise ValueError(f"length mismatch: log-probs {logits.shape} vs {len(Y)} targets")
    pos = np.asarray(sorted(masked_positions), dtype=np.int64)
    if pos.size == 0:
        raise ValueError("cmlm_loss needs at least one masked position")
    tgt = np.asarray(Y, dtype=np.int64)[pos]
    return -logits[pos, tgt].mean()


def joint_ar_loss(ctc_lp, att_l, lam: float):
    """``-lam * ctc_lp + (1 - lam) * att_l`` (scalars or Tensors)."""
    _check_weight(lam, "lambda")
    return (-lam) * ctc_lp + (1.0 - lam) * att_l


def joint_nar_loss(ctc_lp, cmlm_l, gamma: float):
    """``-gamma * ctc_lp + (1 - gamma) * cmlm_l`` (scalars or Tensors)."""
    _check_weight(gamma, "gamma")
    return (-gamma) * ctc_lp + (1.0 - gamma) * cmlm_l


# masking ------------------------------------------------------------------------


def sample_mask_count(L: int, rng: Rng) -> int:
    """Uniform draw from {1, ..., L}."""
    if L <= 0:
        raise SkipUtterance("no tokens to mask")
    return int(rng.integers(1, L))


def apply_training_masks(Y: Sequence[int], n: int, rng: Rng, mask_id: int) -> tuple[list[int], list[int]]:
    """Replace ``n`` distinct uniformly chosen positions by ``mask_id``.

    Returns the masked token list and the sorted masked positions.
    """
    L = len(Y)
    if not 1 <= n <= L:
        raise ValueError(f"cannot mask {n} of {L} tokens")
    pos = sorted(int(p) for p in rng.choice(L, n, replace=False))
    out = list(Y)
    for p in pos:
        out[p] = mask_id
    return out, pos


# batch objective ----------------------------------------------------------------


@dataclass
class BatchLoss:
    loss: Tensor
    ctc: float
    decoder: float
    count: int
    correct: int = 0
    total: int = 0


def feasible_subset(model: MaskCTCModel, batch) -> tuple[list, int]:
    """Drop utterances whose target cannot fit in the encoder frames."""
    f = model.config.downsample_factor
    keep = [u for u in batch if is_feasible(u.features.shape[0] // f, u.transcript)]
    return keep, len(batch) - len(keep)


def batch_loss(model: MaskCTCModel, batch, cfg: TrainConfig, rng: Rng | None, train: bool = True) -> BatchLoss:
    """Per-utterance joint objective averaged over the batch.

    CTC enters as ``log P / L``; decoder losses are per-token means.
    ``rng`` drives CMLM masking and, when ``train`` is set, dropout.
    """
    vocab = model.vocab
    feats = [u.features for u in batch]
    ys = [list(u.transcript) for u in batch]
    drop = rng.child("dropout") if rng is not None and train else None
    enc, lens = model.encode_batch(feats, drop and drop.child("enc"))
    lp = model.ctc_head(enc)
    ctc_lp = ctc_log_prob_batch(lp, lens, ys, vocab.blank)
    if not np.all(np.isfinite(ctc_lp.data)):
        raise NumericError("non-finite CTC log-likelihood in batch (filter infeasible utterances first)")
    tlen = np.array([len(y) for y in ys], dtype=lp.dtype)
    ctc_norm = ctc_lp * Tensor(1.0 / tlen)  # [B]
    B = len(batch)

    if cfg.model_type == "ctc_only":
        per_utt = -ctc_norm
        total = per_utt.sum() * (1.0 / B)
        return BatchLoss(total, float(-ctc_norm.data.mean()), 0.0, B)

    if cfg.model_type == "ar_joint":
        inputs = [[vocab.sos] + y for y in ys]
        targets = [y + [vocab.eos_column] for y in ys]
        out = model.decode_batch(inputs, enc, lens, causal=True, rng=drop and drop.child("dec"))
        weights = np.zeros(out.shape[:2], dtype=out.dtype)
        tgt = np.zeros(out.shape[:2], dtype=np.int64)
        for b, t in enumerate(targets):
            weights[b, : len(t)] = 1.0 / len(t)
            tgt[b, : len(t)] = t
        weight = cfg.lambda_ar
    else:
        mask_rng = (rng or Rng(0)).child("mask")
        inputs, weights = [], np.zeros((B, max(len(y) for y in ys)), dtype=lp.dtype)
        tgt = np.zeros(weights.shape, dtype=np.int64)
        for b, y in enumerate(ys):
            r = mask_rng.child(b)
            masked, pos = apply_training_masks(y, sample_mask_count(len(y), r), r, vocab.mask)
            inputs.append(masked)
            weights[b, pos] = 1.0 / len(pos)
            tgt[b, : len(y)] = y
        out = model.decode_batch(inputs, enc, lens, causal=False, rng=drop and drop.child("dec"))
        weight = cfg.gamma_nar

    picked = out[np.arange(B)[:, None], np.arange(out.shape[1])[None, :], tgt]  # [B, L]
    if cfg.label_smoothing > 0:
        eps = cfg.label_smoothing
        picked = picked * (1.0 - eps) + out.mean(axis=-1) * eps
    dec_nll = -(picked * Tensor(weights)).sum(axis=1)  # [B]
    per_utt = joint_nar_loss(ctc_norm, dec_nll, weight)
    total = per_utt.sum() * (1.0 / B)
    pred = out.data.argmax(axis=-1)
    hit = (pred == tgt) & (weights > 0)
    return BatchLoss(
        total,
        float(-ctc_norm.data.mean()),
        float(dec_nll.data.mean()),
        B,
        correct=int(hit.sum()),
        total=int((weights > 0).sum()),
    )


# optimizer ----------------------------------------------------------------------


def noam_lr(step: int, lr_peak: float, warmup: int) -> float:
    """Inverse-square-root schedule scaled so that ``lr(warmup) == lr_peak``."""
    step = max(step, 1)
    return lr_peak * math.sqrt(warmup) * min(step**-0.5, step * warmup**-1.5)


ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


def optimizer_step(
    params: ModelParams,
    state: TrainState,
    lr_schedule: Callable[[int], float],
    grad_clip: float | None = None,
) -> float:
    """One Adam update using the current ``.grad`` buffers; zeroes them after.

    Returns the learning rate used.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    scale = 1.0
    if grad_clip:
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None))
        if norm > grad_clip:
            scale = grad_clip / norm
    state.step += 1
    lr = lr_schedule(state.step)
    b1, b2 = ADAM_BETAS
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad * scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = (p.data - update).astype(p.data.dtype)
        p.grad = None
    return lr


def config_fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}
