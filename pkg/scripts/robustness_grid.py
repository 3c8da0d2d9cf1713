"""Baseline vs STN over the eight rotation/shear/crop test-set augmentations.

A thin wrapper over ``stndet compare`` that writes compare.json and
compare.txt into ``--out``.

    python3 scripts/robustness_grid.py --config configs/synthetic.json --runs 3 --out runs/grid
"""

import argparse
from pathlib import Path

from stndet.config import TrainConfig
from stndet.harness import compare


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/grid")
    args = p.parse_args()
    out = Path(args.out)
    report = compare(TrainConfig.load(args.config), out, n_runs=args.runs, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(report.to_json() + "\n")
    (out / "compare.txt").write_text(report.to_text())
    print(report.to_text(), end="")


if __name__ == "__main__":
    main()
