#!/usr/bin/env python3
"""Build the bundled MNIST fixture from the npm `mnist` package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as JSON arrays of 784 floats in [0, 1] (pixel / 255, rounded to three
decimals). This script converts every six and nine, plus a few samples of the
other digits, back to bytes and writes gzip IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data
"""
import gzip
import json
import struct
import sys
from pathlib import Path

OTHER_PER_CLASS = 40


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(flat) // 784
        if digit not in (6, 9):
            count = min(count, OTHER_PER_CLASS)
        for i in range(count):
            px = flat[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
            labels.append(digit)
    dst.mkdir(parents=True, exist_ok=True)
    n = len(images)
    with gzip.GzipFile(dst / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(dst / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
