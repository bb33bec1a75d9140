#!/usr/bin/env python3
"""Build a 10k-image MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT licensed) bundles 10,000 MNIST digits as JSON arrays of
pixel intensities in [0, 1]. This script shuffles them with a fixed seed and
writes a 9,000-image training pool and a 1,000-image test set as gzipped IDX.

Usage: scripts/build_mnist_subset.py [OUT_DIR]   (default: data/mnist-subset)
"""
import gzip
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

SEED = 20190322
N_TEST = 1000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist-subset"
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            with open(os.path.join(tmp, "package", "src", "digits", f"{digit}.json")) as f:
                flat = json.load(f)["data"]
            for k in range(len(flat) // 784):
                pix = bytes(min(255, max(0, round(v * 255))) for v in flat[k * 784:(k + 1) * 784])
                samples.append((pix, digit))
    random.Random(SEED).shuffle(samples)
    splits = {"train": samples[:-N_TEST], "t10k": samples[-N_TEST:]}
    for name, rows in splits.items():
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), 0x803,
                  [len(rows), 28, 28], b"".join(p for p, _ in rows))
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), 0x801,
                  [len(rows)], bytes(d for _, d in rows))
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
