#!/usr/bin/env python3
"""Evacuation disruption study on the bundled Sioux Falls network.

Solves the unpoisoned equilibria, runs the bandit-feedback poisoning loop
for several seeds, and writes per-seed artifacts (trace.csv, attack_final.json,
edge_report.csv) plus a cross-seed summary.  Start from the repo root:

    python scripts/run_evacuation_study.py --out artifacts/evacuation --seeds 3
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from wardrop.cli import ExperimentConfig, cmd_attack, cmd_report, resolve_data_path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="artifacts/evacuation")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--config", default=None,
                        help="experiment config (default: bundled evacuation config)")
    args = parser.parse_args()

    config_path = args.config or str(resolve_data_path("evacuation_config.json"))
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    finals = []
    trajectories = []
    for seed in range(args.seeds):
        config = ExperimentConfig.from_file(config_path)
        config.seed = seed
        run_dir = out_root / f"seed{seed}"
        print(f"[evacuation] seed {seed} -> {run_dir}")
        t0 = time.perf_counter()
        rc = cmd_attack("zeroth", config, str(run_dir))
        if rc != 0:
            print(f"[evacuation] seed {seed} failed with exit code {rc}")
            return rc
        cmd_report(str(run_dir))
        meta = json.loads((run_dir / "run_meta.json").read_text())
        finals.append(meta["final_ppoa"])
        rows = (run_dir / "trace.csv").read_text().strip().splitlines()[1:]
        trajectories.append([float(r.split(",")[2]) for r in rows])
        print(
            f"[evacuation] seed {seed}: final PPoA {meta['final_ppoa']:.3f} "
            f"(PoA {meta['unpoisoned_poa']:.3f}) in {time.perf_counter() - t0:.0f}s"
        )

    avg_traj = np.mean(np.array(trajectories), axis=0)
    summary = {
        "seeds": args.seeds,
        "final_ppoa_per_seed": finals,
        "final_ppoa_mean": float(np.mean(finals)),
        "ppoa_trajectory_mean": [float(x) for x in avg_traj],
        "unpoisoned_poa": json.loads(
            (out_root / "seed0" / "run_meta.json").read_text()
        )["unpoisoned_poa"],
    }
    (out_root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"[evacuation] mean final PPoA over {args.seeds} seeds: "
          f"{summary['final_ppoa_mean']:.3f}")
    print(f"[evacuation] summary written to {out_root / 'summary.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
