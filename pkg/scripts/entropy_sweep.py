"""Final coupling entropy and sparsity as the entropy weight alpha grows."""

import argparse

from toktrans.experiments import DeskConfig, entropy_sweep, median_by, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.01, 0.1])
    ap.add_argument("--translator-steps", type=int)
    args = ap.parse_args()

    cfg = with_overrides(DeskConfig(), translator_steps=args.translator_steps)
    rows = []
    for seed in args.seeds:
        for r in entropy_sweep(cfg, seed, tuple(args.alphas)):
            print(f"seed={seed} alpha={r['alpha']:<6g} H={r['entropy']:.4f} sparsity={r['sparsity']:.4f}",
                  flush=True)
            rows.append(r)
    H, S = median_by(rows, "alpha", "entropy"), median_by(rows, "alpha", "sparsity")
    for a in sorted(H):
        print(f"median alpha={a:<6g} H={H[a]:.4f} sparsity={S[a]:.4f}")


if __name__ == "__main__":
    main()
