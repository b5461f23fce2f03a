"""Produce every figure CSV for one seed: train, reserve (with VirtualEdge and
Baseline on the same seed), evaluate, and the fleet-size sweep.

    python scripts/reproduce.py --seed 0 --out runs/seed0 [--set key=value ...]
"""

import argparse
import sys
from pathlib import Path

from vecoffload.cli import main as cli


def run(argv) -> Path:
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli(argv)
    if rc != 0:
        sys.exit(f"{' '.join(argv)} failed with exit code {rc}")
    path = Path(buf.getvalue().strip().splitlines()[-1])
    print(f"{argv[0]:>15}: {path}")
    return path


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--skip-sweep", action="store_true")
    a = p.parse_args()
    common = ["--seed", str(a.seed), "--out", a.out]
    if a.config:
        common += ["--config", a.config]
    for s in a.set:
        common += ["--set", s]
    train = run(["train", "-v", *common])
    ck = str(train / "checkpoint.json")
    run(["reserve", "--checkpoint", ck, "--compare", *common])
    run(["evaluate", "--checkpoint", ck, *common])
    if not a.skip_sweep:
        run(["sweep-vehicles", "--checkpoint", ck, *common])


if __name__ == "__main__":
    main()
