"""Train a coupling with the small source model and reuse it on a wider one.

Reports held-out loss of the transferred model next to the uniform-guess
bound ln(u) and the truncated-embedding initialisation of the wider model.
"""

import argparse
import json

import numpy as np

from toktrans.experiments import DeskConfig, weak_to_strong, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--d", type=int, help="width of the model the coupling is trained with")
    ap.add_argument("--large-d", type=int, help="width of the model it is transferred to")
    ap.add_argument("--target-vocab", type=int)
    args = ap.parse_args()

    cfg = with_overrides(DeskConfig(), d=args.d, large_d=args.large_d, target_vocab=args.target_vocab)
    results = []
    for seed in args.seeds:
        r = weak_to_strong(cfg, seed)
        print(json.dumps(r), flush=True)
        results.append(r)
    med = {k: float(np.median([r[k] for r in results])) for k in ("transfer_nll", "truncation_nll")}
    print(f"median transferred loss {med['transfer_nll']:.4f}, truncated init {med['truncation_nll']:.4f}, "
          f"ln(u) {results[0]['uniform_nll']:.4f}")


if __name__ == "__main__":
    main()
