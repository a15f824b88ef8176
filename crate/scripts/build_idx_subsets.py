#!/usr/bin/env python3
"""Build the 10k-image IDX subsets shipped under data/.

Sources are the JSON dumps in the `mnist` (1.1.0) and `fashion-mnist` (1.1.0)
npm packages. Pass the extracted `package/` directory of each:

    python3 scripts/build_idx_subsets.py MNIST_PKG FASHION_PKG data/
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(out_dir, stem, images, labels):
    n = len(images)
    with gzip.GzipFile(out_dir / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(out_dir / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))


def mnist(pkg):
    samples = []
    for digit in range(10):
        flat = json.load(open(pkg / "src" / "digits" / f"{digit}.json"))["data"]
        for k in range(len(flat) // 784):
            # the npm dump stores pixels as x/255 rounded to 3 decimals
            px = [min(255, max(0, round(v * 255))) for v in flat[k * 784:(k + 1) * 784]]
            samples.append((px, digit))
    return samples


def fashion(pkg, per_class=1000):
    samples = []
    for cls in range(10):
        rows = json.load(open(pkg / "src" / "clothes" / f"{cls}.json"))["data"]
        for row in rows[:per_class]:
            samples.append(([int(v) for v in row], cls))
    return samples


def main():
    mnist_pkg, fashion_pkg, out = map(Path, sys.argv[1:4])
    out.mkdir(parents=True, exist_ok=True)
    for stem, samples in (("mnist-10k", mnist(mnist_pkg)), ("fashion-10k", fashion(fashion_pkg))):
        random.Random(20250101).shuffle(samples)
        write_idx(out, stem, [s[0] for s in samples], [s[1] for s in samples])
        print(stem, len(samples))


if __name__ == "__main__":
    main()
