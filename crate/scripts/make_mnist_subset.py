"""Build data/mnist-10k from the digit arrays shipped in the `mnist` npm package.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-10k

Pixels are stored as floats in [0, 1]; they are rounded back to bytes. The
samples are shuffled once with a fixed seed so that class order does not
leak into the partition.
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits", type=Path, help="directory holding 0.json .. 9.json")
    parser.add_argument("out", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.array(json.loads((args.digits / f"{digit}.json").read_text())["data"], dtype=np.float64)
        n = len(flat) // 784
        images.append(np.clip(np.rint(flat[: n * 784] * 255), 0, 255).astype(np.uint8).reshape(n, 784))
        labels += [digit] * n
    x = np.concatenate(images)
    y = np.array(labels, dtype=np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(y))
    x, y = x[order], y[order]

    args.out.mkdir(parents=True, exist_ok=True)
    with gzip.open(args.out / "images-idx3-ubyte.gz", "wb", 9) as f:
        f.write(struct.pack(">IIII", 0x803, len(y), 28, 28))
        f.write(x.tobytes())
    with gzip.open(args.out / "labels-idx1-ubyte.gz", "wb", 9) as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.tobytes())
    print(f"wrote {len(y)} samples to {args.out}")


if __name__ == "__main__":
    main()
