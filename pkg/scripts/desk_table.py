"""Desk-scale method comparison on synthetic English-like and protein-like data.

    python scripts/desk_table.py --seeds 0 1 2 --out table.json
"""

import argparse
import json
import logging

from toktrans.experiments import DeskConfig, desk_table, median_by, with_overrides
from toktrans.train import SUITE_MODES, format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--target-vocab", type=int)
    ap.add_argument("--translator-steps", type=int)
    ap.add_argument("--finetune-steps", type=int)
    ap.add_argument("--out", help="write all rows and per-mode medians as JSON")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = with_overrides(DeskConfig(), target_vocab=args.target_vocab, translator_steps=args.translator_steps,
                         finetune_steps=args.finetune_steps)
    rows = []
    for seed in args.seeds:
        r, _ = desk_table(cfg, seed)
        print(format_table(r), flush=True)
        rows.extend(r)
    ppl, bpb = median_by(rows, "mode", "perplexity"), median_by(rows, "mode", "bpb")
    print("\nmedian over seeds", args.seeds)
    for mode in SUITE_MODES:
        print(f"{mode:16s} {ppl[mode]:12.3f} {bpb[mode]:8.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": rows, "median_perplexity": ppl, "median_bpb": bpb}, fh, indent=1)


if __name__ == "__main__":
    main()
