"""Final test Dice of agreement vs teacher-only vs client-only pseudo-labels.

    python scripts/compare_pseudo_labels.py --mode heterogeneous --seeds 0 1 2
"""
import argparse
import logging

from samfed.config import PSEUDO_LABELS
from samfed.experiments import compare_pseudo_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=["homogeneous", "heterogeneous", "both"], default="both")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--out", help="write per-run artifacts under this directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    modes = ["homogeneous", "heterogeneous"] if args.mode == "both" else [args.mode]
    caches = {}
    for mode in modes:
        res = compare_pseudo_labels(mode, args.seeds, out_root=args.out, caches=caches,
                                    rounds=args.rounds)
        print(f"\n{mode} ({res.seconds:.0f}s)")
        for v in PSEUDO_LABELS:
            per_seed = " ".join(f"{d:.4f}" for d in res.final_dice[v])
            print(f"  {v:<13} mean {res.mean(v):.4f}   seeds {per_seed}")
        for seed, rates in res.agreement.items():
            print(f"  agreement rate seed {seed}: " + " ".join(f"{a:.3f}" for a in rates))
        gap = res.mean("agreement") - max(res.mean("teacher_only"), res.mean("client_only"))
        print(f"  margin over best ablation: {100 * gap:+.2f} Dice points")


if __name__ == "__main__":
    main()
