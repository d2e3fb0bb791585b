"""Seed-averaged optical vs optical+DEM comparison on synthetic scenes.

Reduced scale by default (1000 candidates, 10 epochs) so three seeds finish
in well under an hour on one core.
"""

import argparse
import json

import numpy as np

from scarseg.benchmark import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--candidates", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="runs/dem_ablation")
    a = ap.parse_args()
    rows = []
    for seed in a.seeds:
        for dem in (False, True):
            cfg = BenchmarkConfig(seed=seed, n_candidates=a.candidates, epochs=a.epochs, use_dem=dem)
            res = run_benchmark(cfg, f"{a.out}/seed{seed}_{'dem' if dem else 'optical'}")
            m = res["metrics"]
            rows.append({"seed": seed, "dem": dem, "f1": m["f1"], "miou": m["miou"]})
            print(json.dumps(rows[-1]), flush=True)
    for dem in (False, True):
        v = [r["miou"] for r in rows if r["dem"] == dem]
        print(f"{'optical+dem' if dem else 'optical':12s} mean miou {np.mean(v):.4f}  ({len(v)} seeds)")


if __name__ == "__main__":
    main()
