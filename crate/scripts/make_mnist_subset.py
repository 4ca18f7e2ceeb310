#!/usr/bin/env python3
"""Build the small MNIST IDX fixture from the npm `mnist` package.

Usage: make_mnist_subset.py <path/to/mnist/package> <out_dir> [n_train] [n_test]

The npm package stores 28x28 digits as JSON floats in [0, 1]; they are
quantized back to u8 and written as standard big-endian IDX files.
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 1000
    n_test = int(sys.argv[4]) if len(sys.argv) > 4 else 200
    samples = []
    for digit in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            samples.append((px, digit))
    random.Random(20180406).shuffle(samples)
    train, test = samples[:n_train], samples[n_train:n_train + n_test]
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_idx_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_idx_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])


if __name__ == "__main__":
    main()
