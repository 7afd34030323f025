"""Print the learned mixing scalars of tri-we per session, averaged over seeds."""
import argparse
import json
from pathlib import Path

import numpy as np


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("run_dir")
    parser.add_argument("--mode", default="tri-we")
    args = parser.parse_args()

    reports = [json.loads(p.read_text()) for p in sorted(Path(args.run_dir).glob("report_seed*.json"))]
    if not reports:
        raise SystemExit(f"no reports in {args.run_dir}")
    trajectories = [r["modes"][args.mode]["alphas"] for r in reports]
    for t in range(1, len(trajectories[0])):
        a = np.array([tr[t] for tr in trajectories])
        print(f"session {t}: alpha1 {a[:, 0].mean():.4f}  alpha2 {a[:, 1].mean():.4f}")


if __name__ == "__main__":
    main()
