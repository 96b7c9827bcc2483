#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Writes digits-images-idx3-ubyte.gz and digits-labels-idx1-ubyte.gz.
Samples are interleaved by a fixed-seed shuffle so that prefixes are
roughly class balanced.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src, dst):
    src, dst = Path(src), Path(dst)
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            samples.append((px, label))
    random.Random(0).shuffle(samples)
    n = len(samples)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(dst / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(l for _, l in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
