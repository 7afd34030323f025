"""Run an ablation config and print mean average accuracy per mode.

    python scripts/run_ablation.py configs/ensemble.json
    python scripts/run_ablation.py configs/amplify.json --out runs/amp
"""
import argparse
from pathlib import Path

import numpy as np

from fscil.harness import REFERENCE_AVG_ACC, ExperimentConfig, run


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("config")
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out or cfg.output_dir)
    reports = run(cfg, out)

    print(f"{'mode':<24}{'avg acc':>10}{'std':>8}{'base drop':>11}{'last':>8}   reference (%)")
    for mode in reports[0]["modes"]:
        acc = np.array([r["modes"][mode]["avg_acc"] for r in reports])
        drop = np.mean([r["modes"][mode]["base_drop"] for r in reports])
        last = np.mean([r["modes"][mode]["sessions"][-1]["acc"] for r in reports])
        ref = REFERENCE_AVG_ACC.get(mode)
        print(f"{mode:<24}{acc.mean():>10.4f}{acc.std():>8.4f}{drop:>11.4f}{last:>8.4f}   "
              f"{'' if ref is None else f'{ref:.2f}'}")
    print(f"{len(reports)} seed(s); reports in {out}")


if __name__ == "__main__":
    main()
