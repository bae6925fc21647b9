"""Token error rate and decoder calls of a trained Mask CTC model across thresholds and K.

    python scripts/sweep_p_thres.py runs/table/maskctc/model.mctc runs/table/data/dev.mcds
"""

from __future__ import annotations

import argparse

from maskctc.corpus import read_dataset
from maskctc.decoding import NUM_MASK, DecodeConfig
from maskctc.harness import P_THRES_GRID, evaluate
from maskctc.model import load_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("model")
    ap.add_argument("data")
    ap.add_argument("--p", type=float, nargs="+", default=[0.0, *P_THRES_GRID])
    ap.add_argument("--k", nargs="+", default=["1", "5", "10", "#mask"])
    args = ap.parse_args()
    model = load_model(args.model)
    ks = [NUM_MASK if k in ("#mask", "num_mask") else int(k) for k in args.k]
    modes = [DecodeConfig(p_thres=p, k_iters=k) for p in args.p for k in (ks if p > 0 else [1])]
    print(evaluate([("maskctc", model)], read_dataset(args.data), {"maskctc": modes}, split="sweep").to_text())


if __name__ == "__main__":
    main()
