"""Inference: greedy CTC, Mask CTC refinement and the autoregressive baseline."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .ctc import MaskedSequence, collapse, ctc_greedy, mask_by_confidence
from .model import MaskCTCModel

NUM_MASK = "num_mask"
ALGORITHMS = ("ctc_greedy", "maskctc", "ar_greedy")


class ModelTypeError(ValueError):
    pass


@dataclass
class DecodeConfig:
    p_thres: float = 0.999
    k_iters: Union[int, str] = 10
    max_ar_len: int = 64
    algorithm: str = "maskctc"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if isinstance(self.k_iters, str):
            if self.k_iters in ("#mask", NUM_MASK):
                self.k_iters = NUM_MASK
            else:
                self.k_iters = int(self.k_iters)
        if self.k_iters != NUM_MASK and self.k_iters < 1:
            raise ValueError("k_iters must be >= 1 or 'num_mask'")
        if not 0.0 <= self.p_thres <= 1.0:
            raise ValueError("p_thres must lie in [0, 1]")

    @property
    def label(self) -> str:
        if self.algorithm == "ctc_greedy":
            return "CTC greedy"
        if self.algorithm == "ar_greedy":
            return "AR greedy"
        k = "#mask" if self.k_iters == NUM_MASK else str(self.k_iters)
        return f"Mask CTC (P_thres={self.p_thres:g}, K={k})"


@dataclass
class DecodeTrace:
    utt_id: str = ""
    initial_ctc: str = ""
    masked_string: str = ""
    fills: list[list[tuple[int, str]]] = field(default_factory=list)
    final: str = ""
    decoder_calls: int = 0
    encoder_calls: int = 0
    wall_time: float = 0.0
    truncated: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        d["fills"] = [[[int(p), s] for p, s in it] for it in self.fills]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> DecodeTrace:
        obj = dict(obj)
        obj["fills"] = [[(int(p), s) for p, s in it] for it in obj.get("fills", [])]
        return cls(**obj)


def replay_fills(trace: DecodeTrace, sep: str = "") -> str:
    """Apply the per-iteration fills to ``masked_string``."""
    syms = list(trace.masked_string) if sep == "" else (trace.masked_string.split(sep) if trace.masked_string else [])
    for it in trace.fills:
        for pos, sym in it:
            syms[pos] = sym
    return sep.join(syms)


def count_calls(trace: DecodeTrace) -> tuple[int, int]:
    return trace.encoder_calls, trace.decoder_calls


def fill_chunk(num_tokens: int, k_iters) -> int:
    """How many masks to commit per iteration: ``max(1, ceil(L/K))``, or 1 for ``num_mask``."""
    if k_iters == NUM_MASK:
        return 1
    return max(1, math.ceil(num_tokens / int(k_iters)))


def easy_first_fill(model: MaskCTCModel, masked: MaskedSequence, enc, k_iters) -> tuple[list[int], list[list[tuple[int, int]]]]:
    """Iteratively commit the most confident masked positions.

    Each iteration runs one bidirectional decoder pass over the current
    sequence, then commits the argmax token at the ``C`` still-masked
    positions whose top probability is highest (ties: lower position).
    Committed tokens are never revisited.
    """
    mask_id = model.vocab.mask
    tokens = list(masked.tokens)
    for p in masked.masked_positions:
        tokens[p] = mask_id
    remaining = sorted(masked.masked_positions)
    chunk = fill_chunk(len(tokens), k_iters)
    fills: list[list[tuple[int, int]]] = []
    while remaining:
        out = model.decode_step(tokens, enc, causal=False).data
        rows = out[remaining]
        best_tok = rows.argmax(axis=-1)
        best_lp = rows.max(axis=-1)
        order = sorted(range(len(remaining)), key=lambda i: (-best_lp[i], remaining[i]))[:chunk]
        step = []
        for i in sorted(order, key=lambda i: remaining[i]):
            tokens[remaining[i]] = int(best_tok[i])
            step.append((remaining[i], int(best_tok[i])))
        fills.append(step)
        done = {p for p, _ in step}
        remaining = [p for p in remaining if p not in done]
    return tokens, fills


def _require(model: MaskCTCModel, model_type: str, what: str) -> None:
    if model.config.model_type != model_type:
        raise ModelTypeError(f"{what} needs a {model_type} model, got {model.config.model_type}")


def ctc_greedy_decode(model: MaskCTCModel, X: np.ndarray, utt_id: str = "") -> tuple[list[int], DecodeTrace]:
    start = time.perf_counter()
    enc = model.encode(X)
    tc = ctc_greedy(model.ctc_head(enc).data, model.vocab.blank)
    text = model.vocab.render(tc.tokens)
    trace = DecodeTrace(utt_id, text, text, [], text, 0, 1, time.perf_counter() - start)
    return tc.tokens, trace


def maskctc_decode(model: MaskCTCModel, X: np.ndarray, cfg: DecodeConfig, utt_id: str = "") -> tuple[list[int], DecodeTrace]:
    """Greedy CTC, mask tokens below ``cfg.p_thres``, refine the masks easy-first.

    The output always has the greedy CTC length.
    """
    _require(model, "maskctc", "Mask CTC decoding")
    vocab = model.vocab
    start = time.perf_counter()
    enc = model.encode(X)
    tc = ctc_greedy(model.ctc_head(enc).data, vocab.blank)
    masked = mask_by_confidence(tc, cfg.p_thres, vocab.mask)
    trace = DecodeTrace(
        utt_id=utt_id,
        initial_ctc=vocab.render(tc.tokens),
        masked_string=vocab.render(masked.tokens),
        encoder_calls=1,
    )
    if masked.masked_positions:
        tokens, fills = easy_first_fill(model, masked, enc, cfg.k_iters)
        trace.fills = [[(p, vocab.symbol(t)) for p, t in it] for it in fills]
        trace.decoder_calls = len(fills)
    else:
        tokens = list(tc.tokens)
    trace.final = vocab.render(tokens)
    trace.wall_time = time.perf_counter() - start
    return tokens, trace


def ar_greedy_decode(model: MaskCTCModel, X: np.ndarray, max_ar_len: int, utt_id: str = "") -> tuple[list[int], DecodeTrace]:
    """Token-by-token argmax from <sos> until <eos> or ``max_ar_len`` tokens."""
    _require(model, "ar_joint", "autoregressive decoding")
    vocab = model.vocab
    start = time.perf_counter()
    enc = model.encode(X)
    seq = [vocab.sos]
    out: list[int] = []
    fills = []
    calls = 0
    truncated = False
    while True:
        if len(out) >= max_ar_len:
            truncated = True
            break
        lp = model.decode_step(seq, enc, causal=True).data
        calls += 1
        nxt = int(lp[-1].argmax())
        if nxt == vocab.eos_column:
            break
        out.append(nxt)
        seq.append(nxt)
        fills.append([(len(out) - 1, vocab.symbol(nxt))])
    final = vocab.render(out)
    trace = DecodeTrace(utt_id, "", "", fills, final, calls, 1, time.perf_counter() - start, truncated)
    return out, trace


def decode(model: MaskCTCModel, X: np.ndarray, cfg: DecodeConfig, utt_id: str = "") -> tuple[list[int], DecodeTrace]:
    if cfg.algorithm == "ctc_greedy":
        return ctc_greedy_decode(model, X, utt_id)
    if cfg.algorithm == "ar_greedy":
        return ar_greedy_decode(model, X, cfg.max_ar_len, utt_id)
    return maskctc_decode(model, X, cfg, utt_id)


def greedy_reference(model: MaskCTCModel, X: np.ndarray) -> list[int]:
    """collapse(argmax(ctc_head(encode(X)))) computed directly."""
    lp = model.ctc_head(model.encode(X)).data
    return collapse(lp.argmax(axis=-1), model.vocab.blank)
