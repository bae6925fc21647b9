"""Training orchestration, checkpoint averaging, evaluation and benchmarking."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Utterance, read_dataset
from .ctc import ctc_greedy
from .decoding import NUM_MASK, DecodeConfig, DecodeTrace, decode
from .metrics import ErrorCounts, EvalReport, EvalRow
from .model import (
    CheckpointError,
    MaskCTCModel,
    ModelConfig,
    ModelParams,
    Vocab,
    load_checkpoint,
    load_model,
    save_model,
)
from .numerics import NumericError, Rng, Tensor, backward
from .training import ConfigError, TrainConfig, TrainState, batch_loss, feasible_subset, noam_lr, optimizer_step

log = logging.getLogger(__name__)

FRAME_SHIFT_S = 0.01


class CheckpointIncompatibleError(CheckpointError):
    pass


# flat key-value config files ------------------------------------------------------


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = value
    return out


def build_dataclasses(values: dict[str, str], *classes):
    """Distribute flat keys over dataclass instances; unknown keys are errors."""
    instances = [cls() for cls in classes]
    known = set()
    kwargs = [dict() for _ in classes]
    for inst, kw in zip(instances, kwargs):
        for f in fields(inst):
            known.add(f.name)
            if f.name in values:
                try:
                    kw[f.name] = _coerce(values[f.name], getattr(inst, f.name))
                except ValueError as e:
                    raise ConfigError(f"bad value for {f.name}: {values[f.name]!r}") from e
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return [cls(**kw) for cls, kw in zip(classes, kwargs)]


def format_kv(*instances) -> str:
    lines = []
    seen = set()
    for inst in instances:
        lines.append(f"# {type(inst).__name__}")
        for f in fields(inst):
            if f.name in seen:
                continue
            seen.add(f.name)
            v = getattr(inst, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_train_config(path) -> tuple[TrainConfig, ModelConfig]:
    values = parse_kv(Path(path).read_text())
    tcfg, mcfg = build_dataclasses(values, TrainConfig, ModelConfig)
    mcfg.model_type = tcfg.model_type
    return tcfg, mcfg


# checkpoint averaging ------------------------------------------------------------


def average_params(params: Sequence[ModelParams]) -> ModelParams:
    if not params:
        raise ValueError("need at least one checkpoint to average")
    names = list(params[0])
    for p in params[1:]:
        if list(p) != names:
            raise CheckpointIncompatibleError("checkpoints have different parameter names")
        for n in names:
            if p[n].shape != params[0][n].shape:
                raise CheckpointIncompatibleError(f"shape mismatch for {n!r}: {p[n].shape} vs {params[0][n].shape}")
    out = {}
    for n in names:
        acc = np.zeros(params[0][n].shape, dtype=np.float64)
        for p in params:
            acc += p[n].data
        out[n] = Tensor((acc / len(params)).astype(np.float32), name=n)
    return ModelParams(out)


def average_checkpoints(paths: Sequence, scores: Sequence[float] | None = None, top: int | None = None) -> ModelParams:
    """Element-wise mean of checkpoints, optionally only the ``top`` best by ``scores``."""
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one checkpoint to average")
    if scores is not None and top is not None:
        ranked = sorted(range(len(paths)), key=lambda i: (-scores[i], i))[:top]
        paths = [paths[i] for i in sorted(ranked)]
    return average_params([load_checkpoint(p) for p in paths])


# training loop -------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    train_loss: float
    train_ctc: float
    train_dec: float
    dev_loss: float
    dev_acc: float
    dev_ctc_ter: float
    skipped: int


def _batches(items: list, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def bucketed_batches(utts: Sequence[Utterance], size: int, rng: Rng, bucket: int = 8) -> list[list[Utterance]]:
    """Shuffle, sort by length inside windows of ``bucket`` batches, shuffle batch order."""
    order = rng.permutation(len(utts))
    batches = []
    for i in range(0, len(order), size * bucket):
        window = sorted(order[i : i + size * bucket], key=lambda j: (utts[j].features.shape[0], j))
        batches.extend(window[k : k + size] for k in range(0, len(window), size))
    return [[utts[j] for j in batches[b]] for b in rng.permutation(len(batches))]


def greedy_ctc_counts(model: MaskCTCModel, utts: Sequence[Utterance], batch_size: int = 64) -> ErrorCounts:
    counts = ErrorCounts()
    frozen = model.frozen()
    for batch in _batches(list(utts), batch_size):
        enc, lens = frozen.encode_batch([u.features for u in batch])
        lp = frozen.ctc_head(enc).data
        for b, u in enumerate(batch):
            counts.add(u.transcript, ctc_greedy(lp[b, : lens[b]], model.vocab.blank).tokens)
    return counts


def evaluate_dev(model: MaskCTCModel, dev: Sequence[Utterance], cfg: TrainConfig) -> tuple[float, float, float]:
    """(loss, accuracy, greedy-CTC TER) on the dev split with dropout off.

    Accuracy is 1 - TER for CTC-only models and token accuracy of the
    decoder (masked positions / teacher-forced steps) otherwise.
    """
    frozen = model.frozen()
    loss_sum, n, correct, total = 0.0, 0, 0, 0
    for i, batch in enumerate(_batches(list(dev), cfg.batch_size)):
        out = batch_loss(frozen, batch, cfg, Rng(cfg.seed).child("devmask", i), train=False)
        loss_sum += float(out.loss.data) * out.count
        n += out.count
        correct += out.correct
        total += out.total
    ter = greedy_ctc_counts(model, dev).ter
    acc = 1.0 - ter if cfg.model_type == "ctc_only" else correct / max(total, 1)
    return loss_sum / max(n, 1), acc, ter


def train_model(
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    vocab: Vocab,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    out_dir,
) -> tuple[MaskCTCModel, list[EpochMetrics]]:
    """Train, checkpoint each epoch (ring buffer), then write the averaged model.

    Files: ``metrics.csv``, ``checkpoints/epochNNN.mctc``, ``model.mctc``
    (+ JSON sidecars) and ``train_config.txt``.
    """
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(format_kv(tcfg, mcfg))
    mcfg.model_type = tcfg.model_type
    model = MaskCTCModel.initialize(mcfg, vocab, tcfg.seed)
    state = TrainState()
    root = Rng(tcfg.seed)

    train_ok, skipped = feasible_subset(model, list(train))
    if skipped:
        log.warning("skipping %d training utterances whose targets do not fit the encoder frames", skipped)
    dev_ok, dev_skipped = feasible_subset(model, list(dev))
    if dev_skipped:
        log.warning("skipping %d dev utterances whose targets do not fit the encoder frames", dev_skipped)

    schedule = lambda s: noam_lr(s, tcfg.lr_peak, tcfg.warmup_steps)  # noqa: E731
    history: list[EpochMetrics] = []
    kept: list[tuple[Path, float]] = []
    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        csv.writer(fh).writerow([f.name for f in fields(EpochMetrics)])

    for epoch in range(1, tcfg.epochs + 1):
        tot = ctc_sum = dec_sum = 0.0
        count = 0
        lr = 0.0
        batches = bucketed_batches(train_ok, tcfg.batch_size, root.child("shuffle", epoch))
        for bi, batch in enumerate(batches):
            res = batch_loss(model, batch, tcfg, root.child("step", epoch, bi))
            if not np.isfinite(res.loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            backward(res.loss)
            lr = optimizer_step(model.params, state, schedule, tcfg.grad_clip)
            tot += float(res.loss.data) * res.count
            ctc_sum += res.ctc * res.count
            dec_sum += res.decoder * res.count
            count += res.count
        dev_loss, dev_acc, dev_ter = evaluate_dev(model, dev_ok, tcfg)
        m = EpochMetrics(
            epoch, state.step, lr, tot / count, ctc_sum / count, dec_sum / count, dev_loss, dev_acc, dev_ter, skipped
        )
        history.append(m)
        state.history.append(asdict(m))
        with csv_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in asdict(m).values()])
        log.info(
            "epoch %d loss %.4f ctc %.4f dec %.4f | dev loss %.4f acc %.4f ter %.4f",
            epoch, m.train_loss, m.train_ctc, m.train_dec, dev_loss, dev_acc, dev_ter,
        )
        ck = ck_dir / f"epoch{epoch:03d}.mctc"
        save_model(model, ck)
        kept.append((ck, dev_acc))
        while len(kept) > tcfg.keep_last:
            old, _ = kept.pop(0)
            old.unlink(missing_ok=True)
            old.with_name(old.name + ".json").unlink(missing_ok=True)

    avg = average_checkpoints([p for p, _ in kept], [s for _, s in kept], tcfg.average_top)
    final = MaskCTCModel(mcfg, vocab, avg)
    save_model(final, out / "model.mctc")
    return final, history


def run_train(config_path, data_dir, out_dir, seed: int | None = None, overrides: dict | None = None):
    values = parse_kv(Path(config_path).read_text()) if config_path else {}
    values.update(overrides or {})
    tcfg, mcfg = build_dataclasses(values, TrainConfig, ModelConfig)
    if seed is not None:
        tcfg.seed = seed
    mcfg.model_type = tcfg.model_type
    data = Path(data_dir)
    manifest = json.loads((data / "manifest.json").read_text())
    corpus = manifest["corpus"]
    mcfg.feat_dim = corpus["feat_dim"]
    vocab = Vocab.default(corpus["vocab_size"])
    train = read_dataset(data / "train.mcds")
    dev = read_dataset(data / "dev.mcds")
    return train_model(tcfg, mcfg, vocab, train, dev, out_dir)


# evaluation ---------------------------------------------------------------------


def worker_threads(requested: int | None = None) -> int:
    cap = int(os.environ.get("MASKCTC_THREADS", "0") or 0)
    n = requested or cap or 1
    return max(1, min(n, cap) if cap else n)


def decode_all(
    model: MaskCTCModel, utts: Sequence[Utterance], cfg: DecodeConfig, threads: int = 1
) -> list[tuple[list[int], DecodeTrace]]:
    frozen = model.frozen()
    job = lambda u: decode(frozen, u.features, cfg, u.id)  # noqa: E731
    if threads <= 1:
        return [job(u) for u in utts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, utts))


def default_modes(model: MaskCTCModel, p_thres: float = 0.999, ks: Sequence = (1, 5, 10, NUM_MASK), max_ar_len: int = 64):
    t = model.config.model_type
    if t == "ctc_only":
        return [DecodeConfig(algorithm="ctc_greedy")]
    if t == "ar_joint":
        return [DecodeConfig(algorithm="ar_greedy", max_ar_len=max_ar_len)]
    modes = [DecodeConfig(p_thres=0.0, k_iters=1)]
    modes += [DecodeConfig(p_thres=p_thres, k_iters=k) for k in ks]
    return modes


P_THRES_GRID = (0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999)


def tune_p_thres(
    model: MaskCTCModel,
    dev: Sequence[Utterance],
    k_iters=10,
    grid: Sequence[float] = P_THRES_GRID,
    threads: int = 1,
) -> tuple[float, dict[float, float]]:
    """Pick the masking threshold with the lowest dev TER (earliest grid entry on ties)."""
    ters = {}
    for p in grid:
        counts = ErrorCounts()
        for u, (hyp, _) in zip(dev, decode_all(model, dev, DecodeConfig(p_thres=p, k_iters=k_iters), threads)):
            counts.add(u.transcript, hyp)
        ters[p] = counts.ter
    best = min(grid, key=lambda p: ters[p])
    return best, ters


def _fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def _iterations_label(cfg: DecodeConfig) -> str:
    if cfg.algorithm == "ar_greedy":
        return "L"
    if cfg.algorithm == "ctc_greedy" or cfg.p_thres == 0.0:
        return "1"
    return "#mask" if cfg.k_iters == NUM_MASK else str(cfg.k_iters)


def evaluate(
    models: Sequence[tuple[str, MaskCTCModel]],
    utts: Sequence[Utterance],
    modes: dict[str, list[DecodeConfig]] | None = None,
    split: str = "eval",
    threads: int = 1,
    references: Sequence[Sequence[int]] | None = None,
    trace_sink: list | None = None,
) -> EvalReport:
    """Decode ``utts`` with every (model, mode) pair and tabulate errors."""
    refs = references if references is not None else [u.transcript for u in utts]
    audio_s = sum(u.features.shape[0] for u in utts) * FRAME_SHIFT_S
    fp_parts = [split, [u.id for u in utts]]
    rows = []
    for name, model in models:
        fp_parts.append(hashlib.sha256(b"".join(t.data.tobytes() for t in model.params.values())).hexdigest())
        for cfg in (modes or {}).get(name) or default_modes(model):
            fp_parts.append(asdict(cfg))
            results = decode_all(model, utts, cfg, threads)
            counts = ErrorCounts()
            for ref, (hyp, _) in zip(refs, results):
                counts.add(ref, hyp)
            traces = [t for _, t in results]
            if trace_sink is not None:
                trace_sink.append((name, cfg, traces))
            n = max(len(traces), 1)
            rows.append(
                EvalRow(
                    model=name,
                    mode=cfg.label,
                    iterations=_iterations_label(cfg),
                    ter=counts.ter,
                    ser=counts.ser,
                    subs=counts.subs,
                    ins=counts.ins,
                    dels=counts.dels,
                    ref_tokens=counts.ref_tokens,
                    mean_decoder_calls=sum(t.decoder_calls for t in traces) / n,
                    mean_encoder_calls=sum(t.encoder_calls for t in traces) / n,
                    rtf=sum(t.wall_time for t in traces) / audio_s if audio_s else 0.0,
                )
            )
    return EvalReport(split=split, fingerprint=_fingerprint(*fp_parts), rows=rows)


def write_report(report: EvalReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / f"{stem}.json", out / f"{stem}.txt"
    jp.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    tp.write_text(report.to_text())
    return jp, tp


def run_eval(model_paths: Sequence, dataset_path, modes=None, out_dir=None, threads: int = 1) -> EvalReport:
    models = [(_model_name(p, m), m) for p in model_paths for m in [load_model(p)]]
    utts = read_dataset(dataset_path)
    report = evaluate(models, utts, modes, split=Path(dataset_path).stem, threads=worker_threads(threads))
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _model_name(path, model: MaskCTCModel) -> str:
    return model.config.model_type


# benchmark ----------------------------------------------------------------------


@dataclass
class BenchRow:
    model: str
    mode: str
    mean_decoder_calls: float
    mean_encoder_calls: float
    mean_output_len: float
    median_wall_s: float
    rtf: float
    speedup_vs_ar: float | None = None


def bench(
    models: Sequence[tuple[str, MaskCTCModel]],
    utts: Sequence[Utterance],
    modes: dict[str, list[DecodeConfig]],
    repeats: int = 3,
) -> list[BenchRow]:
    """Single-threaded timing; each utterance's wall time is the median of ``repeats`` runs."""
    audio_s = sum(u.features.shape[0] for u in utts) * FRAME_SHIFT_S
    rows = []
    for name, model in models:
        frozen = model.frozen()
        for cfg in modes.get(name) or default_modes(model):
            per_utt, calls, enc_calls, lengths = [], [], [], []
            for u in utts:
                times = []
                for _ in range(repeats):
                    hyp, trace = decode(frozen, u.features, cfg, u.id)
                    times.append(trace.wall_time)
                per_utt.append(statistics.median(times))
                calls.append(trace.decoder_calls)
                enc_calls.append(trace.encoder_calls)
                lengths.append(len(hyp))
            n = max(len(utts), 1)
            rows.append(
                BenchRow(
                    model=name,
                    mode=cfg.label,
                    mean_decoder_calls=sum(calls) / n,
                    mean_encoder_calls=sum(enc_calls) / n,
                    mean_output_len=sum(lengths) / n,
                    median_wall_s=statistics.median(per_utt) if per_utt else 0.0,
                    rtf=sum(per_utt) / audio_s if audio_s else 0.0,
                )
            )
    ar = [r for r in rows if r.mode == "AR greedy"]
    if ar:
        base = ar[0].median_wall_s
        for r in rows:
            r.speedup_vs_ar = base / r.median_wall_s if r.median_wall_s > 0 else None
    return rows


def bench_table(rows: Sequence[BenchRow]) -> str:
    head = f"{'Model':<10} {'Decode':<32} {'dec/utt':>8} {'enc/utt':>8} {'len':>6} {'median ms':>10} {'RTF':>8} {'speedup':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        sp = f"{r.speedup_vs_ar:8.2f}" if r.speedup_vs_ar is not None else f"{'-':>8}"
        lines.append(
            f"{r.model:<10} {r.mode:<32} {r.mean_decoder_calls:8.2f} {r.mean_encoder_calls:8.2f} "
            f"{r.mean_output_len:6.2f} {1000 * r.median_wall_s:10.3f} {r.rtf:8.4f} {sp}"
        )
    return "\n".join(lines) + "\n"


def run_bench(model_paths: Sequence, dataset_path, modes=None, repeats: int = 3, out_dir=None) -> list[BenchRow]:
    models = [(_model_name(p, m), m) for p in model_paths for m in [load_model(p)]]
    utts = read_dataset(dataset_path)
    rows = bench(models, utts, modes or {}, repeats)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n")
        (out / "bench.txt").write_text(bench_table(rows))
    return rows
