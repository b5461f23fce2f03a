"""Mean latency and mean window maximum (l_H) of constant split ratios over a
grid of uniform reservations.  Shows where local computation pays off.

    python scripts/split_landscape.py --vehicles 4 --out landscape.csv
"""

import argparse
import csv

import numpy as np

from vecoffload.config import load_config
from vecoffload.date import ConstantSplit, evaluate_policy, window_max_latencies


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vehicles", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", type=float, nargs="+", default=[0.0, 0.1, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--levels", type=float, nargs="+", default=[0.1, 0.3, 0.5, 0.7, 1.0])
    p.add_argument("--windows", type=int, default=5)
    p.add_argument("--out", default="split_landscape.csv")
    a = p.parse_args()
    cfg = load_config(overrides=[f"env.n_vehicles={a.vehicles}"])
    rows = []
    for level in a.levels:
        x = (level,) * 3
        for s in a.splits:
            decide = ConstantSplit(s)
            lh = window_max_latencies(decide, cfg, x, a.seed, windows=a.windows)
            lat = evaluate_policy(decide, cfg, [x], a.seed)["latencies"]
            rows.append({"reservation": level, "split": s, "mean_latency_ms": float(np.mean(lat)),
                         "mean_l_h_ms": float(np.mean(lh))})
            print(f"x={level:.2f} a={s:.2f}  mean {rows[-1]['mean_latency_ms']:7.1f} ms  "
                  f"l_H {rows[-1]['mean_l_h_ms']:7.1f} ms")
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
