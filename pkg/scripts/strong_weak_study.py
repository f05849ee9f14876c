"""Gap between the strong rollout and the tilted weak value of one fixed control, as N grows."""
import argparse
import csv
import sys

import numpy as np

from condrbsde.control import strong_value_for_control, weak_value_for_control
from condrbsde.suites import random_strong_control


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--instances", type=int, default=10)
    parser.add_argument("--steps", type=int, nargs="+", default=[2, 4, 6, 8])
    parser.add_argument("--seed", type=int, default=12000)
    parser.add_argument("--control", type=float, default=0.7)
    args = parser.parse_args(argv)
    writer = csv.writer(sys.stdout)
    writer.writerow(["instance", *(f"N={n}" for n in args.steps), "monotone"])
    for index in range(args.instances):
        signed = []
        for n in args.steps:
            inst = random_strong_control(args.seed + index, n)
            control = [np.full(4**i, args.control) for i in range(n)]
            signed.append(
                strong_value_for_control(control, inst.problem, inst.tree)
                - weak_value_for_control(control, inst.problem, inst.tree)
            )
        sizes = np.abs(signed)
        writer.writerow([index, *(f"{d:+.6f}" for d in signed), bool(np.all(np.diff(sizes) < 0))])


if __name__ == "__main__":
    main()
