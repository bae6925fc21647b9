"""Desk-scale comparison of greedy CTC, Mask CTC and autoregressive decoding.

Generates the default corpus, trains ctc_only, maskctc and ar_joint models with
the default configs, picks the masking threshold on dev, then writes an eval
report and a single-threaded timing table.

    python scripts/run_table.py --out runs/table --seed 1
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from maskctc.corpus import CorpusConfig, read_dataset, write_splits
from maskctc.decoding import NUM_MASK, DecodeConfig
from maskctc.harness import bench, bench_table, evaluate, train_model, tune_p_thres, write_report
from maskctc.model import ModelConfig, Vocab, load_model
from maskctc.training import TrainConfig

SPLITS = {"train": 2000, "dev": 200, "eval": 200}
TYPES = ("ctc_only", "maskctc", "ar_joint")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/table"))
    ap.add_argument("--seed", type=int, default=1, help="training seed")
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=3, help="timing repeats per utterance")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    corpus = CorpusConfig(seed=args.corpus_seed)
    data = args.out / "data"
    if not (data / "manifest.json").exists():
        write_splits(corpus, data, SPLITS)
    train, dev, ev = (read_dataset(data / f"{s}.mcds") for s in SPLITS)

    models, train_time = {}, {}
    for mt in TYPES:
        path = args.out / mt / "model.mctc"
        start = time.perf_counter()
        if path.exists():
            models[mt] = load_model(path)
        else:
            tcfg = TrainConfig(model_type=mt, seed=args.seed)
            mcfg = ModelConfig(model_type=mt, feat_dim=corpus.feat_dim)
            models[mt], _ = train_model(tcfg, mcfg, Vocab.default(corpus.vocab_size), train, dev, args.out / mt)
        train_time[mt] = time.perf_counter() - start

    p, dev_ters = tune_p_thres(models["maskctc"], dev, k_iters=10)
    modes = {
        "ctc_only": [DecodeConfig(algorithm="ctc_greedy")],
        "maskctc": [DecodeConfig(p_thres=0.0)] + [DecodeConfig(p_thres=p, k_iters=k) for k in (1, 5, 10, NUM_MASK)],
        "ar_joint": [DecodeConfig(algorithm="ar_greedy", max_ar_len=4 * corpus.utt_len_range[1])],
    }
    named = [(mt, models[mt]) for mt in TYPES]
    report = evaluate(named, ev, modes)
    write_report(report, args.out)
    rows = bench(named, ev, modes, repeats=args.repeats)
    (args.out / "bench.txt").write_text(bench_table(rows))
    summary = {"p_thres": p, "dev_ter_by_p_thres": dev_ters, "train_seconds": train_time}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"p_thres = {p} (picked on dev)")
    print(report.to_text())
    print(bench_table(rows))


if __name__ == "__main__":
    main()
