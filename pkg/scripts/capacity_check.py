"""Teacher-sized vs client-sized network, same public-set training, validation Dice."""
import argparse

import numpy as np

from samfed.experiments import capacity_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    scores = capacity_check(args.seeds)
    for name, vals in scores.items():
        print(f"{name:<8} mean {np.mean(vals):.4f}  " + " ".join(f"{v:.4f}" for v in vals))


if __name__ == "__main__":
    main()
