#!/usr/bin/env python3
"""Rebuild data/mnist/*-ubyte from the digit corpus shipped in the `mnist` npm package.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 scripts/mnist_idx_from_npm.py package/src/digits data/mnist

The npm package carries 10,000 MNIST digits as [0,1] floats. They are quantized
back to bytes, shuffled with a fixed seed, and split 8,000 train / 2,000 test.
"""
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            raw = np.asarray(json.load(f)["data"], dtype=np.float64)
        raw = raw[: (raw.size // 784) * 784].reshape(-1, 784)
        images.append(np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(raw.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(20240101).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = 8000
    os.makedirs(dst, exist_ok=True)
    for name, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        im, lb = images[sl], labels[sl]
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte"), 0x803, (len(lb), 28, 28), im)
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte"), 0x801, (len(lb),), lb)
        print(name, len(lb), np.bincount(lb, minlength=10))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
