#!/usr/bin/env python3
"""Download the CIFAR-10 binary batches into a data directory.

The smoke tests only read the first 1000 records of data_batch_1.bin; this
script fetches and unpacks the full binary archive once:

    python scripts/fetch_cifar10.py --dest ~/data/cifar10
    export EQPROP_DATA_DIR=~/data/cifar10

eqprop_lab.data.find_cifar10 looks for data_batch_1.bin either directly under
the data root or inside cifar-10-batches-bin/ (the archive's layout).
"""

import argparse
import io
import os
import tarfile
import urllib.request

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default="data/cifar10")
    args = ap.parse_args()
    os.makedirs(args.dest, exist_ok=True)
    marker = os.path.join(args.dest, "cifar-10-batches-bin",
                          "data_batch_1.bin")
    if os.path.exists(marker):
        print(f"{marker} already present, nothing to do")
        return
    print(f"fetching {URL} (~170 MB)")
    with urllib.request.urlopen(URL, timeout=300) as r:
        blob = r.read()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tf:
        tf.extractall(args.dest, filter="data")
    print(f"unpacked into {args.dest}")


if __name__ == "__main__":
    main()
