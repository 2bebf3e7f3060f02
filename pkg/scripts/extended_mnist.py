#!/usr/bin/env python3
"""Extended MNIST run for the discrete-time one-hidden-layer network.

This is the long-form counterpart of the desk-scale smoke run: 30 epochs on
the full training set, targeting low-single-digit test error. It needs the
MNIST IDX files (see scripts/fetch_mnist.py) and several CPU-hours.

    python scripts/extended_mnist.py --data-dir ~/data/mnist --epochs 30
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from eqprop_lab.cli import (RunConfig, TrainModelConfig, run)  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output", default="runs/extended-mnist")
    args = ap.parse_args()
    cfg = RunConfig(
        experiment="train-discrete",
        options=TrainModelConfig(
            sizes=[784, 500, 10], dataset="mnist", data_dir=args.data_dir,
            T=30, K=10, beta=0.5, epochs=args.epochs, batch_size=20,
            lrs={"W1": 0.1, "W2": 0.05, "b1": 0.02, "b2": 0.02}),
        output_dir=args.output, seed=args.seed, force=True)
    summary = run(cfg)
    print(json.dumps(summary["result"], indent=1))


if __name__ == "__main__":
    main()
