"""Synthetic pseudo-speech corpus and its binary file format.

Each content token owns a fixed unit-norm prototype vector. An utterance
renders its transcript token by token, repeating the prototype for a random
number of frames (the "speaking rate"), optionally separated by silence
(all-zero frames), and adds white Gaussian noise to every frame.

Two optional knobs give the task structure a refinement decoder can use:

* ``lexicon_size > 0`` draws transcripts as concatenated "words" from a fixed
  random lexicon (then truncated to the sampled length), so neighbouring
  tokens predict each other. With 0, tokens are i.i.d. uniform.
* ``confusable_pairs = k`` makes token ``2i+1`` a near-copy of token ``2i``
  (cosine ``confusable_cos``) for ``i < k``, which yields low-confidence
  substitutions that acoustics alone cannot settle.

With ``allow_repeats = False`` no token directly follows itself: two identical
neighbours render as one unbroken block of the same prototype, which no model
can split reliably when durations vary.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

DATASET_MAGIC = b"MCDS"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message carries the byte offset."""


@dataclass
class CorpusConfig:
    vocab_size: int = 20
    feat_dim: int = 24
    frames_per_token_range: tuple[int, int] = (5, 10)
    silence_prob: float = 0.3
    silence_len_range: tuple[int, int] = (1, 4)
    noise_sigma: float = 0.2
    utt_len_range: tuple[int, int] = (6, 20)
    seed: int = 0
    lexicon_size: int = 16
    word_len_range: tuple[int, int] = (3, 6)
    confusable_pairs: int = 6
    confusable_cos: float = 0.99
    allow_repeats: bool = False

    def __post_init__(self):
        self.frames_per_token_range = tuple(self.frames_per_token_range)
        self.silence_len_range = tuple(self.silence_len_range)
        self.utt_len_range = tuple(self.utt_len_range)
        self.word_len_range = tuple(self.word_len_range)
        r_min, r_max = self.frames_per_token_range
        l_min, l_max = self.utt_len_range
        s_min, s_max = self.silence_len_range
        if r_min < 1 or r_max < r_min:
            raise ValueError(f"bad frames_per_token_range {self.frames_per_token_range}")
        if l_min < 1 or l_max < l_min:
            raise ValueError(f"bad utt_len_range {self.utt_len_range}")
        if s_min < 1 or s_max < s_min:
            raise ValueError(f"bad silence_len_range {self.silence_len_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("silence_prob must lie in [0, 1]")
        if 2 * self.confusable_pairs > self.vocab_size:
            raise ValueError("confusable_pairs needs 2 tokens per pair")
        if not -1.0 < self.confusable_cos < 1.0:
            raise ValueError("confusable_cos must lie in (-1, 1)")
        if self.lexicon_size < 0 or self.word_len_range[0] < 1 or self.word_len_range[1] < self.word_len_range[0]:
            raise ValueError("bad lexicon settings")
        if not self.allow_repeats and self.vocab_size < 2:
            raise ValueError("allow_repeats=False needs at least 2 tokens")
        if self.lexicon_size > self.distinct_words():
            raise ValueError(f"lexicon_size={self.lexicon_size} exceeds the {self.distinct_words()} possible words")

    def distinct_words(self) -> int:
        V = self.vocab_size
        lo, hi = self.word_len_range
        if self.allow_repeats:
            return sum(V**n for n in range(lo, hi + 1))
        return sum(V * (V - 1) ** (n - 1) for n in range(lo, hi + 1))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> CorpusConfig:
        return cls(**obj)


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, D] float32
    transcript: list[int]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.id == other.id
            and self.transcript == other.transcript
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


def prototypes(cfg: CorpusConfig) -> np.ndarray:
    """``[vocab_size, feat_dim]`` unit-norm prototypes, one stream per token id."""
    root = Rng(cfg.seed).child("proto")
    rows = []
    for tok in range(cfg.vocab_size):
        v = root.child(tok).normal(cfg.feat_dim)
        rows.append(v / np.linalg.norm(v))
    for i in range(cfg.confusable_pairs):
        base = rows[2 * i]
        q = rows[2 * i + 1] - (rows[2 * i + 1] @ base) * base
        q /= np.linalg.norm(q)
        c = cfg.confusable_cos
        rows[2 * i + 1] = c * base + math.sqrt(1.0 - c * c) * q
    return np.array(rows, dtype=np.float32)


def _uniform_token(cfg: CorpusConfig, rng: Rng, prev: int | None) -> int:
    if cfg.allow_repeats or prev is None:
        return int(rng.integers(0, cfg.vocab_size - 1))
    t = int(rng.integers(0, cfg.vocab_size - 2))
    return t + (t >= prev)


def lexicon(cfg: CorpusConfig) -> list[list[int]]:
    """Distinct random words (token lists); empty when ``lexicon_size == 0``."""
    rng = Rng(cfg.seed).child("lexicon")
    words: list[list[int]] = []
    seen = set()
    while len(words) < cfg.lexicon_size:
        n = int(rng.integers(*cfg.word_len_range))
        w: list[int] = []
        for _ in range(n):
            w.append(_uniform_token(cfg, rng, w[-1] if w else None))
        if tuple(w) not in seen:
            seen.add(tuple(w))
            words.append(w)
    return words


def render(
    transcript: Sequence[int],
    durations: Sequence[int],
    silences: Sequence[int],
    protos: np.ndarray,
) -> np.ndarray:
    """Noise-free frames: ``silences[i]`` zero frames follow token i (i < L-1)."""
    D = protos.shape[1]
    blocks = []
    for i, (tok, r) in enumerate(zip(transcript, durations)):
        blocks.append(np.repeat(protos[tok][None, :], r, axis=0))
        if i < len(silences) and silences[i]:
            blocks.append(np.zeros((silences[i], D), dtype=np.float32))
    if not blocks:
        return np.zeros((0, D), dtype=np.float32)
    return np.concatenate(blocks).astype(np.float32)


def sample_transcript(cfg: CorpusConfig, rng: Rng, words: Sequence[Sequence[int]] = ()) -> list[int]:
    L = int(rng.integers(*cfg.utt_len_range))
    out: list[int] = []
    if not words:
        while len(out) < L:
            out.append(_uniform_token(cfg, rng, out[-1] if out else None))
        return out
    while len(out) < L:
        pool = words
        if not cfg.allow_repeats and out:
            pool = [w for w in words if w[0] != out[-1]] or words
        out.extend(pool[int(rng.integers(0, len(pool) - 1))])
    return out[:L]


def gen_utterance(
    cfg: CorpusConfig,
    rng: Rng,
    utt_id: str = "utt",
    protos: np.ndarray | None = None,
    words: Sequence[Sequence[int]] | None = None,
) -> Utterance:
    if protos is None:
        protos = prototypes(cfg)
    if words is None:
        words = lexicon(cfg)
    transcript = sample_transcript(cfg, rng, words)
    L = len(transcript)
    durations = [int(r) for r in rng.integers(*cfg.frames_per_token_range, size=L)]
    gaps = rng.random(L - 1) < cfg.silence_prob
    gap_lens = rng.integers(*cfg.silence_len_range, size=L - 1)
    silences = [int(n) if g else 0 for g, n in zip(gaps, gap_lens)]
    feats = render(transcript, durations, silences, protos)
    if cfg.noise_sigma > 0:
        feats = feats + rng.normal(feats.shape, scale=cfg.noise_sigma).astype(np.float32)
    return Utterance(id=utt_id, features=feats.astype(np.float32), transcript=transcript)


def gen_corpus(cfg: CorpusConfig, n: int, split: str) -> list[Utterance]:
    """``n`` utterances whose streams are keyed by (seed, split, index)."""
    protos = prototypes(cfg)
    words = lexicon(cfg)
    root = Rng(cfg.seed).child("split", split)
    return [gen_utterance(cfg, root.child(i), f"{split}-{i:05d}", protos, words) for i in range(n)]


# file format --------------------------------------------------------------------


def dataset_bytes(utts: Sequence[Utterance]) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(utts))]
    for u in utts:
        raw = u.id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{len(u.transcript)}I", len(u.transcript), *u.transcript))
        T, D = u.features.shape
        parts.append(struct.pack("<II", T, D))
        parts.append(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_dataset(buf: bytes) -> list[Utterance]:
    if len(buf) == 0:
        return []
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise DatasetFormatError(f"truncated dataset: need {n} bytes at byte offset {off}, file has {len(buf)}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise DatasetFormatError("bad magic at byte offset 0 (expected b'MCDS')")
    version, count = struct.unpack("<II", take(8))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at byte offset 4")
    utts = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        start = off
        try:
            utt_id = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise DatasetFormatError(f"invalid UTF-8 utterance id at byte offset {start}") from None
        (L,) = struct.unpack("<I", take(4))
        tokens = list(struct.unpack(f"<{L}I", take(4 * L)))
        T, D = struct.unpack("<II", take(8))
        feats = np.frombuffer(take(4 * T * D), dtype="<f4").astype(np.float32).reshape(T, D)
        utts.append(Utterance(id=utt_id, features=feats, transcript=tokens))
    if off != len(buf):
        raise DatasetFormatError(f"trailing bytes at byte offset {off}")
    return utts


def write_dataset(utts: Sequence[Utterance], path) -> None:
    Path(path).write_bytes(dataset_bytes(utts))


def read_dataset(path) -> list[Utterance]:
    return parse_dataset(Path(path).read_bytes())


SPLITS = ("train", "dev", "eval")


def write_splits(cfg: CorpusConfig, out_dir, sizes: dict[str, int]) -> dict[str, Path]:
    """Generate and write each split plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n in sizes.items():
        paths[split] = out / f"{split}.mcds"
        write_dataset(gen_corpus(cfg, n, split), paths[split])
    manifest = {"corpus": cfg.to_json(), "splits": {s: {"file": p.name, "count": sizes[s]} for s, p in paths.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths
