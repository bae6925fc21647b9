"""Transformer encoder-decoder with a CTC head and a switchable decoder.

Index layout for a vocabulary of V content tokens::

    0 .. V-1   content tokens
    V          <blank>   (last CTC column)
    V+1        <eos>     (last decoder column in causal mode)
    V+2        <sos>
    V+3        <MASK>
    V+4        <pad>

The CTC head emits V+1 columns (content + blank). The decoder emits V+1
columns (content + eos); in non-causal (CMLM) mode the eos column is dropped
before normalisation, so CMLM log-probs cover the content tokens only.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from string import ascii_lowercase
from typing import Iterator, Sequence

import numpy as np

from .numerics import Rng, Tensor, dropout, layer_norm, log_softmax, relu, softmax

RESERVED = ("<blank>", "<eos>", "<sos>", "<MASK>", "<pad>")
MODEL_TYPES = ("ctc_only", "ar_joint", "maskctc")
_NEG = -1e9


class InputTooShortError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        clash = set(self.tokens) & set(RESERVED)
        if clash:
            raise ValueError(f"reserved tokens in vocabulary: {sorted(clash)}")

    @classmethod
    def default(cls, size: int) -> Vocab:
        if size <= len(ascii_lowercase):
            return cls(tuple(ascii_lowercase[:size]))
        return cls(tuple(f"w{i}" for i in range(size)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return self.size

    @property
    def eos(self) -> int:
        return self.size + 1

    @property
    def eos_column(self) -> int:
        """Column of <eos> in causal decoder output."""
        return self.size

    @property
    def sos(self) -> int:
        return self.size + 2

    @property
    def mask(self) -> int:
        return self.size + 3

    @property
    def pad(self) -> int:
        return self.size + 4

    @property
    def num_embeddings(self) -> int:
        return self.size + len(RESERVED)

    def symbol(self, idx: int) -> str:
        if idx < self.size:
            return self.tokens[idx]
        if idx == self.mask:
            return "_"
        return RESERVED[idx - self.size]

    def render(self, ids: Sequence[int]) -> str:
        """Human-readable string; masks render as ``_``."""
        sep = "" if all(len(t) == 1 for t in self.tokens) else " "
        return sep.join(self.symbol(int(i)) for i in ids)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "reserved": list(RESERVED)}

    @classmethod
    def from_json(cls, obj: dict) -> Vocab:
        return cls(tuple(obj["tokens"]))


@dataclass
class ModelConfig:
    model_type: str = "maskctc"
    feat_dim: int = 24
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    downsample_factor: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_type not in MODEL_TYPES:
            raise ValueError(f"model_type must be one of {MODEL_TYPES}, got {self.model_type!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def has_decoder(self) -> bool:
        return self.model_type != "ctc_only"

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def param_count(cfg: ModelConfig, vocab_size: int) -> int:
    """Closed-form number of scalar parameters (see README)."""
    d, ff, V = cfg.d_model, cfg.d_ff, vocab_size
    att = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * ff + ff + ff * d + d
    n = cfg.downsample_factor * cfg.feat_dim * d + d
    n += cfg.enc_layers * (2 * ln + att + ffn) + ln
    n += d * (V + 1) + (V + 1)
    if cfg.has_decoder:
        n += (V + len(RESERVED)) * d
        n += cfg.dec_layers * (3 * ln + 2 * att + ffn) + ln
        n += d * (V + 1) + (V + 1)
    return n


class ModelParams:
    """Ordered name -> Tensor map."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> ModelParams:
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def frozen(self) -> ModelParams:
        """Same storage, no gradient tracking (for inference)."""
        return ModelParams({k: Tensor(v.data, name=k) for k, v in self.tensors.items()})

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()}
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(cfg: ModelConfig, vocab: Vocab, rng: Rng) -> ModelParams:
    d, ff, V = cfg.d_model, cfg.d_ff, vocab.size
    p: dict[str, Tensor] = {}

    def dense(name, n_in, n_out, zero=False):
        w = np.zeros((n_in, n_out)) if zero else rng.child(name).normal((n_in, n_out), scale=1.0 / math.sqrt(n_in))
        p[name + ".w"] = Tensor(w.astype(np.float32), requires_grad=True, name=name + ".w")
        p[name + ".b"] = Tensor(np.zeros(n_out, np.float32), requires_grad=True, name=name + ".b")

    def norm(name):
        p[name + ".g"] = Tensor(np.ones(d, np.float32), requires_grad=True, name=name + ".g")
        p[name + ".b"] = Tensor(np.zeros(d, np.float32), requires_grad=True, name=name + ".b")

    def attention(name):
        for part in ("q", "k", "v", "o"):
            dense(f"{name}.{part}", d, d)

    def feed_forward(name):
        dense(name + ".w1", d, ff)
        dense(name + ".w2", ff, d)

    dense("enc.in", cfg.downsample_factor * cfg.feat_dim, d)
    for i in range(cfg.enc_layers):
        norm(f"enc.{i}.ln1")
        attention(f"enc.{i}.att")
        norm(f"enc.{i}.ln2")
        feed_forward(f"enc.{i}.ff")
    norm("enc.ln")
    dense("ctc", d, V + 1, zero=True)
    if cfg.has_decoder:
        emb = rng.child("dec.emb").normal((vocab.num_embeddings, d), scale=1.0 / math.sqrt(d))
        p["dec.emb"] = Tensor(emb.astype(np.float32), requires_grad=True, name="dec.emb")
        for i in range(cfg.dec_layers):
            norm(f"dec.{i}.ln1")
            attention(f"dec.{i}.self")
            norm(f"dec.{i}.ln2")
            attention(f"dec.{i}.src")
            norm(f"dec.{i}.ln3")
            feed_forward(f"dec.{i}.ff")
        norm("dec.ln")
        dense("dec.out", d, V + 1, zero=True)
    return ModelParams(p)


@lru_cache(maxsize=64)
def _sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    pe.setflags(write=False)
    return pe


def positional_encoding(length: int, d: int, dtype=np.float32) -> np.ndarray:
    return _sinusoid(length, d).astype(dtype)


class MaskCTCModel:
    """Functional wrapper: configuration + vocabulary + parameters.

    Forward methods take an optional ``rng``; dropout is active only when
    one is given.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, params: ModelParams):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab, seed: int) -> MaskCTCModel:
        return cls(config, vocab, init_params(config, vocab, Rng(seed).child("init")))

    def frozen(self) -> MaskCTCModel:
        return MaskCTCModel(self.config, self.vocab, self.params.frozen())

    def astype(self, dtype) -> MaskCTCModel:
        return MaskCTCModel(self.config, self.vocab, self.params.astype(dtype))

    @property
    def dtype(self):
        return self.params["enc.in.w"].dtype

    # building blocks --------------------------------------------------------

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[name + ".g"], self.params[name + ".b"], eps=1e-12)

    def _attention(self, x: Tensor, mem: Tensor, bias: np.ndarray, name: str, rng: Rng | None) -> Tensor:
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        h = self.config.heads
        dk = d // h
        q = self._dense(x, name + ".q").reshape(B, Tq, h, dk).transpose(0, 2, 1, 3)
        k = self._dense(mem, name + ".k").reshape(B, Tk, h, dk).transpose(0, 2, 3, 1)
        v = self._dense(mem, name + ".v").reshape(B, Tk, h, dk).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dk)) + Tensor(bias)
        att = dropout(softmax(scores, axis=-1), self.config.dropout_rate, rng)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._dense(ctx, name + ".o")

    def _feed_forward(self, x: Tensor, name: str, rng: Rng | None) -> Tensor:
        hidden = dropout(relu(self._dense(x, name + ".w1")), self.config.dropout_rate, rng)
        return self._dense(hidden, name + ".w2")

    def _key_bias(self, lengths: np.ndarray, width: int) -> np.ndarray:
        valid = np.arange(width)[None, :] < lengths[:, None]
        return np.where(valid, 0.0, _NEG).astype(self.dtype)[:, None, None, :]

    # encoder ----------------------------------------------------------------

    def stack_frames(self, feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Concatenate ``downsample_factor`` consecutive frames; returns padded batch and lengths."""
        f = self.config.downsample_factor
        out_lens = []
        for x in feats:
            if x.shape[0] < f:
                raise InputTooShortError(f"input has {x.shape[0]} frames, fewer than downsample_factor={f}")
            out_lens.append(x.shape[0] // f)
        lens = np.array(out_lens, dtype=np.int64)
        D = self.config.feat_dim
        batch = np.zeros((len(feats), int(lens.max()), f * D), dtype=self.dtype)
        for b, (x, n) in enumerate(zip(feats, lens)):
            batch[b, :n] = np.asarray(x[: n * f], dtype=self.dtype).reshape(n, f * D)
        return batch, lens

    def encode_batch(self, feats: Sequence[np.ndarray], rng: Rng | None = None) -> tuple[Tensor, np.ndarray]:
        """Encode a list of ``[T_b, D]`` feature arrays; returns ``[B, T', d]`` and T' per item."""
        cfg = self.config
        x, lens = self.stack_frames(feats)
        B, Tp, _ = x.shape
        h = self._dense(Tensor(x), "enc.in") + Tensor(positional_encoding(Tp, cfg.d_model, self.dtype))
        h = dropout(h, cfg.dropout_rate, rng and rng.child("in"))
        bias = self._key_bias(lens, Tp)
        for i in range(cfg.enc_layers):
            r = rng and rng.child("enc", i)
            x = self._norm(h, f"enc.{i}.ln1")
            a = self._attention(x, x, bias, f"enc.{i}.att", r and r.child(0))
            h = h + dropout(a, cfg.dropout_rate, r and r.child(1))
            f_out = self._feed_forward(self._norm(h, f"enc.{i}.ln2"), f"enc.{i}.ff", r and r.child(2))
            h = h + dropout(f_out, cfg.dropout_rate, r and r.child(3))
        return self._norm(h, "enc.ln"), lens

    def encode(self, X: np.ndarray, rng: Rng | None = None) -> Tensor:
        enc, _ = self.encode_batch([X], rng)
        return enc.reshape(enc.shape[1:])

    def ctc_head(self, enc: Tensor) -> Tensor:
        """Per-frame log-distribution over content tokens + blank."""
        return log_softmax(self._dense(enc, "ctc"), axis=-1)

    # decoder ----------------------------------------------------------------

    def decode_batch(
        self,
        inputs: Sequence[Sequence[int]],
        enc: Tensor,
        enc_lens: np.ndarray,
        causal: bool,
        rng: Rng | None = None,
    ) -> Tensor:
        """Position-wise log-probs ``[B, L, V+1]`` (causal) or ``[B, L, V]`` (CMLM)."""
        cfg, vocab = self.config, self.vocab
        if not cfg.has_decoder:
            raise ValueError("this model has no decoder (model_type=ctc_only)")
        if causal and any(vocab.mask in seq for seq in inputs):
            raise ValueError("<MASK> tokens are not allowed in causal decoding")
        lens = np.array([len(s) for s in inputs], dtype=np.int64)
        L = int(lens.max())
        ids = np.full((len(inputs), L), vocab.pad, dtype=np.int64)
        for b, s in enumerate(inputs):
            ids[b, : len(s)] = s
        d = cfg.d_model
        h = self.params["dec.emb"][ids] * math.sqrt(d) + Tensor(positional_encoding(L, d, self.dtype))
        h = dropout(h, cfg.dropout_rate, rng and rng.child("in"))
        self_bias = self._key_bias(lens, L)
        if causal:
            future = np.triu(np.ones((L, L), dtype=bool), k=1)
            self_bias = self_bias + np.where(future, _NEG, 0.0).astype(self.dtype)[None, None]
        src_bias = self._key_bias(np.asarray(enc_lens), enc.shape[1])
        for i in range(cfg.dec_layers):
            r = rng and rng.child("dec", i)
            x = self._norm(h, f"dec.{i}.ln1")
            h = h + dropout(self._attention(x, x, self_bias, f"dec.{i}.self", r and r.child(0)), cfg.dropout_rate, r and r.child(1))
            x = self._norm(h, f"dec.{i}.ln2")
            h = h + dropout(self._attention(x, enc, src_bias, f"dec.{i}.src", r and r.child(2)), cfg.dropout_rate, r and r.child(3))
            x = self._norm(h, f"dec.{i}.ln3")
            h = h + dropout(self._feed_forward(x, f"dec.{i}.ff", r and r.child(4)), cfg.dropout_rate, r and r.child(5))
        logits = self._dense(self._norm(h, "dec.ln"), "dec.out")
        if not causal:
            logits = logits[:, :, : vocab.size]
        return log_softmax(logits, axis=-1)

    def decode_step(self, Y_in: Sequence[int], enc: Tensor, causal: bool, rng: Rng | None = None) -> Tensor:
        """Single-utterance decoder pass; ``enc`` is ``[T', d]``."""
        enc_b = enc.reshape(1, *enc.shape)
        out = self.decode_batch([list(Y_in)], enc_b, np.array([enc.shape[0]]), causal, rng)
        return out.reshape(out.shape[1:])


# checkpoints -----------------------------------------------------------------

MAGIC = b"MCTC"
FORMAT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes, requires_grad: bool = False) -> ModelParams:
    def take(n, off):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        return buf[off : off + n], off + n

    head, off = take(4, 0)
    if head != MAGIC:
        raise CheckpointError("not an MCTC checkpoint (bad magic)")
    raw, off = take(8, off)
    version, count = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        raw, off = take(4, off)
        (nlen,) = struct.unpack("<I", raw)
        raw, off = take(nlen, off)
        name = raw.decode("utf-8")
        raw, off = take(4, off)
        (rank,) = struct.unpack("<I", raw)
        raw, off = take(4 * rank, off)
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims)) if rank else 1
        raw, off = take(4 * size, off)
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = Tensor(data, requires_grad=requires_grad, name=name)
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after checkpoint at byte {off}")
    return ModelParams(tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, requires_grad: bool = False) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), requires_grad)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model: MaskCTCModel, path) -> None:
    """Write ``path`` (binary params) and ``path.json`` (config + vocab)."""
    save_checkpoint(model.params, path)
    meta = {"config": asdict(model.config), "vocab": model.vocab.to_json()}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> MaskCTCModel:
    meta = json.loads(sidecar_path(path).read_text())
    config = ModelConfig.from_dict(meta["config"])
    vocab = Vocab.from_json(meta["vocab"])
    params = load_checkpoint(path)
    expected = init_params(config, vocab, Rng(0))
    for name, t in expected.items():
        if name not in params or params[name].shape != t.shape:
            raise CheckpointError(f"checkpoint does not match config at tensor {name!r}")
    return MaskCTCModel(config, vocab, params)
