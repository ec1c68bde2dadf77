#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_npm_to_idx.py package/src/digits data/mnist

The package stores 10,000 MNIST digits as grey levels divided by 255 and
rounded to three decimals; rounding back to bytes recovers the originals.
Samples are shuffled with a fixed seed and split 5,000 / 5,000 into
`train-*` and `test-*` gzipped IDX pairs.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            samples.append((pixels, digit))
    random.Random(20200617).shuffle(samples)
    half = len(samples) // 2
    for name, part in (("train", samples[:half]), ("test", samples[half:])):
        images = [p for pixels, _ in part for p in pixels]
        labels = [label for _, label in part]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(part), 28, 28), images)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(part),), labels)
        print(name, len(part))


if __name__ == "__main__":
    main(*sys.argv[1:3])
