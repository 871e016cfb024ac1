#!/usr/bin/env python3
"""Write the bundled MNIST subset as gzipped IDX files.

The source is the 5,000-image MNIST sample shipped with ``mlxtend``
(500 images per digit).  Each digit is split 400/100 into train/test with a
fixed seed, and the result is written in the standard IDX layout so that
``fedair.data.load_mnist`` reads it exactly as it would the full dataset.

    python scripts/make_mnist_subset.py data/mnist-subset
"""
import argparse
import gzip
import struct
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

TEST_PER_CLASS = 100


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()

    X, y = mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(y == digit))
        test_idx.extend(idx[:TEST_PER_CLASS])
        train_idx.extend(idx[TEST_PER_CLASS:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", X[train_idx], 0x803)
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", y[train_idx], 0x801)
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", X[test_idx], 0x803)
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", y[test_idx], 0x801)
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {args.out_dir}")


if __name__ == "__main__":
    main()
