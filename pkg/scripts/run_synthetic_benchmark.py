"""Train and score one U-net on a synthetic scene (the desk-scale benchmark).

    python scripts/run_synthetic_benchmark.py --seed 0 --out runs/bench0
"""

import argparse
import json
from dataclasses import fields

from scarseg.benchmark import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser()
    for f in fields(BenchmarkConfig):
        if f.type in ("bool", bool):
            ap.add_argument(f"--no-{f.name.replace('_', '-')}", dest=f.name, action="store_false")
        else:
            ap.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    ap.add_argument("--out", default="runs/benchmark")
    args = vars(ap.parse_args())
    out = args.pop("out")
    res = run_benchmark(BenchmarkConfig(**args), out)
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
