#!/usr/bin/env python3
"""Download the MNIST IDX files into a data directory.

The core tool never touches the network; run this once and point
EQPROP_DATA_DIR (or the config's data_dir) at the target directory:

    python scripts/fetch_mnist.py --dest ~/data/mnist
    export EQPROP_DATA_DIR=~/data/mnist

The four files land uncompressed under their standard names
(train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
t10k-labels-idx1-ubyte), which is what eqprop_lab.data.find_mnist expects.
"""

import argparse
import gzip
import os
import urllib.request

MIRRORS = [
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
]
FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default="data/mnist")
    args = ap.parse_args()
    os.makedirs(args.dest, exist_ok=True)
    for name in FILES:
        out = os.path.join(args.dest, name[:-3])
        if os.path.exists(out):
            print(f"{out} already present, skipping")
            continue
        last_err = None
        for base in MIRRORS:
            url = base + name
            try:
                print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as r:
                    raw = gzip.decompress(r.read())
                with open(out, "wb") as f:
                    f.write(raw)
                print(f"wrote {out} ({len(raw)} bytes)")
                break
            except Exception as exc:  # try the next mirror
                last_err = exc
        else:
            raise SystemExit(f"all mirrors failed for {name}: {last_err}")


if __name__ == "__main__":
    main()
