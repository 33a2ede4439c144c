#!/usr/bin/env python3
"""Write a 5000-image MNIST subset as standard IDX files.

The images come from the 5k MNIST sample bundled with mlxtend. Each class
contributes 400 training and 100 test images. Output files use the usual
MNIST names so the C++ loader treats them like the full dataset.
"""
import argparse
import pathlib
import struct

import numpy as np


def write_idx_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=pathlib.Path, help="output directory (e.g. data/mnist)")
    parser.add_argument("--train-per-class", type=int, default=400)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.reshape(-1, 28, 28)
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = np.flatnonzero(y == k)
        rng.shuffle(idx)
        train_idx.extend(idx[: args.train_per_class])
        test_idx.extend(idx[args.train_per_class :])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out / "train-images-idx3-ubyte", x[train_idx])
    write_idx_labels(args.out / "train-labels-idx1-ubyte", y[train_idx])
    write_idx_images(args.out / "t10k-images-idx3-ubyte", x[test_idx])
    write_idx_labels(args.out / "t10k-labels-idx1-ubyte", y[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {args.out}")


if __name__ == "__main__":
    main()
