#!/usr/bin/env python3
"""Convert the digit JSON bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Writes `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` (10000 samples,
28x28, shuffled with a fixed seed so that file order mixes the classes).
"""
import json
import random
import struct
import sys
from pathlib import Path


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            pix = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            samples.append((pix, digit))
    random.Random(20240611).shuffle(samples)
    with open(dst / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(samples), 28, 28))
        for pix, _ in samples:
            f.write(pix)
    with open(dst / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} samples to {dst}")


if __name__ == "__main__":
    main()
