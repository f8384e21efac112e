"""Synthetic end-to-end benchmark: synth, pre-train, variational fit, MC
prediction and metrics, with wall-clock timing.

    python scripts/run_benchmark.py --out runs/bench
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from seisbayes.benchmark import BENCHMARK_MODEL, run_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--epochs-pretrain", type=int, default=500)
    ap.add_argument("--epochs-uq", type=int, default=300)
    ap.add_argument("--N", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE", help="override a model field")
    args = ap.parse_args()
    model_kw = dict(BENCHMARK_MODEL)
    for item in args.set:
        k, _, v = item.partition("=")
        model_kw[k] = json.loads(v)
    t0 = time.perf_counter()
    result = run_benchmark(
        args.out, epochs_pretrain=args.epochs_pretrain, epochs_uq=args.epochs_uq, N=args.N, seed=args.seed,
        model_overrides=model_kw, progress=True,
    )
    result["total_seconds"] = time.perf_counter() - t0
    print(json.dumps(result, indent=2, sort_keys=True))
    (args.out / "benchmark.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
