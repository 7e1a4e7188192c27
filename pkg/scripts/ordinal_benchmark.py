"""Backbone vs DiffHPE-Wrapper vs DiffHPE-2D on the synthetic desk-scale benchmark.

    python3 scripts/ordinal_benchmark.py --config configs/ordinal_benchmark.json --out runs/ordinal
"""

import argparse
import json
import logging
from pathlib import Path

import torch

from diffhpe.experiments import BenchmarkConfig, format_reports, ordinal_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="JSON object with BenchmarkConfig fields")
    ap.add_argument("--out", default="runs/ordinal")
    ap.add_argument("--max-steps", type=int, help="training steps per diffusion model")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    conf = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.max_steps is not None:
        conf["max_steps"] = args.max_steps
    result = ordinal_benchmark(BenchmarkConfig.from_dict(conf), args.out)
    print(format_reports(result.reports))
    for name, ok in result.checks().items():
        print(f"{'ok  ' if ok else 'MISS'} {name}")
    print(f"total {result.seconds['total'] / 60:.1f} min; summary in {Path(args.out) / 'summary.json'}")


if __name__ == "__main__":
    main()
