"""Command-line entry point: gen-data, train, decode, eval, bench.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .corpus import SPLITS, CorpusConfig, DatasetFormatError, read_dataset, write_splits
from .decoding import NUM_MASK, DecodeConfig
from .harness import (
    bench,
    bench_table,
    build_dataclasses,
    default_modes,
    evaluate,
    format_kv,
    parse_kv,
    run_train,
    worker_threads,
    write_report,
)
from .model import CheckpointError, ModelConfig, load_model
from .numerics import NumericError
from .training import ConfigError, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("maskctc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output directory")


def _k_list(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if part in ("num_mask", "#mask"):
            out.append(NUM_MASK)
        elif part:
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskctc", description="Mask CTC synthetic-speech laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/dev/eval splits and manifest.json")
    _common(p)
    for split, n in (("train", 2000), ("dev", 200), ("eval", 200)):
        p.add_argument(f"--{split}", type=int, default=n, help=f"{split} utterances (default {n})")

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", type=Path, help="directory written by gen-data")
    p.add_argument("--print-config", action="store_true", help="print effective config and exit")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    for name, helptext in (("decode", "decode a dataset"), ("eval", "score decode modes"), ("bench", "time decode modes")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--model", type=Path, action="append", required=True, help="model.mctc (repeatable)")
        p.add_argument("--data", type=Path, required=True, help="dataset .mcds file")
        p.add_argument("--p-thres", type=float, default=None)
        p.add_argument("--k", type=str, default=None, help="int, 'num_mask', or comma list (eval/bench)")
        p.add_argument("--max-ar-len", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if name == "decode":
            p.add_argument("--emit-trace", action="store_true", help="write <out>/<model>.trace.jsonl")
        if name == "bench":
            p.add_argument("--repeats", type=int, default=3)
    return parser


def _decode_settings(args) -> dict:
    values = parse_kv(args.config.read_text()) if args.config else {}
    p_thres = float(values.pop("p_thres", 0.999))
    ks = _k_list(values.pop("k_iters", "1,5,10,num_mask"))
    max_ar_len = int(values.pop("max_ar_len", 64))
    repeats = int(values.pop("repeats", 3))
    if values:
        raise ConfigError(f"unknown config keys: {sorted(values)}")
    if args.p_thres is not None:
        p_thres = args.p_thres
    if args.k is not None:
        ks = _k_list(args.k)
    if args.max_ar_len is not None:
        max_ar_len = args.max_ar_len
    if getattr(args, "repeats", None) is not None:
        repeats = args.repeats
    return {"p_thres": p_thres, "ks": ks, "max_ar_len": max_ar_len, "repeats": repeats}


def _cmd_gen_data(args) -> int:
    values = parse_kv(args.config.read_text()) if args.config else {}
    (cfg,) = build_dataclasses(values, CorpusConfig)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or Path("data")
    write_splits(cfg, out, {"train": args.train, "dev": args.dev, "eval": args.eval})
    print(f"wrote {', '.join(SPLITS)} to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    values = parse_kv(args.config.read_text()) if args.config else {}
    values.update(overrides)
    tcfg, mcfg = build_dataclasses(values, TrainConfig, ModelConfig)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.print_config:
        mcfg.model_type = tcfg.model_type
        sys.stdout.write(format_kv(tcfg, mcfg))
        return EXIT_OK
    if args.data is None:
        raise UsageError("train needs --data")
    out = args.out or Path("runs") / tcfg.model_type
    run_train(args.config, args.data, out, seed=args.seed, overrides=overrides)
    print(f"model written to {out / 'model.mctc'}")
    return EXIT_OK


def _models(args):
    return [(m.config.model_type, m) for m in (load_model(p) for p in args.model)]


def _modes(models, settings, single: bool):
    modes = {}
    for name, model in models:
        if single and model.config.model_type == "maskctc":
            modes[name] = [DecodeConfig(p_thres=settings["p_thres"], k_iters=settings["ks"][0])]
        else:
            modes[name] = default_modes(model, settings["p_thres"], settings["ks"], settings["max_ar_len"])
    return modes


def _cmd_decode(args) -> int:
    settings = _decode_settings(args)
    models = _models(args)
    utts = read_dataset(args.data)
    out = args.out or Path("decode")
    out.mkdir(parents=True, exist_ok=True)
    sink: list = []
    report = evaluate(models, utts, _modes(models, settings, single=True), Path(args.data).stem,
                      worker_threads(args.threads), trace_sink=sink)
    for name, cfg, traces in sink:
        with (out / f"{name}.hyp.txt").open("w") as fh:
            for t in traces:
                fh.write(f"{t.utt_id}\t{t.final}\n")
        if args.emit_trace:
            with (out / f"{name}.trace.jsonl").open("w") as fh:
                for t in traces:
                    fh.write(json.dumps(t.to_json()) + "\n")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cmd_eval(args) -> int:
    settings = _decode_settings(args)
    models = _models(args)
    utts = read_dataset(args.data)
    report = evaluate(models, utts, _modes(models, settings, single=False), Path(args.data).stem,
                      worker_threads(args.threads))
    write_report(report, args.out or Path("eval"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cmd_bench(args) -> int:
    settings = _decode_settings(args)
    if args.k is None and not args.config:
        settings["ks"] = [10]
    models = _models(args)
    utts = read_dataset(args.data)
    rows = bench(models, utts, _modes(models, settings, single=False), settings["repeats"])
    out = args.out or Path("bench")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n")
    table = bench_table(rows)
    (out / "bench.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "decode": _cmd_decode, "eval": _cmd_eval, "bench": _cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"maskctc: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetFormatError, CheckpointError) as e:
        print(f"maskctc: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"maskctc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
