"""Levenshtein alignment and error-rate bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance with its S/I/D decomposition.

    Returns ``(dist, subs, ins, dels)``. When several optimal alignments
    exist the backtrace prefers the diagonal (match/substitution), then a
    deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return d[n][m], subs, ins, dels


@dataclass
class ErrorCounts:
    ref_tokens: int = 0
    subs: int = 0
    ins: int = 0
    dels: int = 0
    sentences: int = 0
    sentence_errors: int = 0

    def add(self, ref: Sequence, hyp: Sequence) -> None:
        dist, s, i, d = edit_distance(ref, hyp)
        self.ref_tokens += len(ref)
        self.subs += s
        self.ins += i
        self.dels += d
        self.sentences += 1
        self.sentence_errors += dist > 0

    @property
    def errors(self) -> int:
        return self.subs + self.ins + self.dels

    @property
    def ter(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else 0.0

    @property
    def ser(self) -> float:
        return self.sentence_errors / self.sentences if self.sentences else 0.0


@dataclass
class EvalRow:
    model: str
    mode: str
    iterations: str
    ter: float
    ser: float
    subs: int
    ins: int
    dels: int
    ref_tokens: int
    mean_decoder_calls: float
    mean_encoder_calls: float
    rtf: float


@dataclass
class EvalReport:
    split: str
    fingerprint: str
    rows: list[EvalRow] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "fingerprint": self.fingerprint,
            "rows": [vars(r).copy() for r in self.rows],
        }

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        return cls(obj["split"], obj["fingerprint"], [EvalRow(**r) for r in obj["rows"]])

    def to_text(self) -> str:
        head = f"{'Model':<10} {'Decode':<32} {'Iter':>6} {'TER%':>7} {'SER%':>7} {'S':>5} {'I':>5} {'D':>5} {'dec/utt':>8} {'RTF':>8}"
        lines = [f"split={self.split} fingerprint={self.fingerprint}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.model:<10} {r.mode:<32} {r.iterations:>6} {100 * r.ter:7.2f} {100 * r.ser:7.2f} "
                f"{r.subs:5d} {r.ins:5d} {r.dels:5d} {r.mean_decoder_calls:8.2f} {r.rtf:8.4f}"
            )
        return "\n".join(lines) + "\n"
