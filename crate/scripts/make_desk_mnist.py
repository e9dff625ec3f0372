#!/usr/bin/env python3
"""Build the desk-scale MNIST subset shipped in data/mnist-desk.

Source: the 10,000 MNIST digits bundled with the `mnist` npm package
(v1.1.0, `src/digits/<d>.json`), stored there as pixel/255 rounded to three
decimals. Multiplying by 255 and rounding recovers the original bytes.

Output: gzip-compressed IDX files, 8,000 train / 2,000 test, shuffled with a
fixed seed.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_desk_mnist.py package/src/digits data/mnist-desk
"""

import gzip
import json
import os
import random
import struct
import sys

SEED = 20151201
N_TEST = 2000
SIDE = 28


def load(digits_dir):
    samples = []
    for digit in range(10):
        with open(os.path.join(digits_dir, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % (SIDE * SIDE) == 0
        for start in range(0, len(flat), SIDE * SIDE):
            pixels = bytes(
                min(255, max(0, round(v * 255))) for v in flat[start : start + SIDE * SIDE]
            )
            samples.append((pixels, digit))
    return samples


def write_images(path, samples):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for pixels, _ in samples:
            fh.write(pixels)


def write_labels(path, samples):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(samples)))
        fh.write(bytes(label for _, label in samples))


def main():
    digits_dir, out_dir = sys.argv[1], sys.argv[2]
    samples = load(digits_dir)
    random.Random(SEED).shuffle(samples)
    test, train = samples[:N_TEST], samples[N_TEST:]
    os.makedirs(out_dir, exist_ok=True)
    write_images(os.path.join(out_dir, "train-images-idx3-ubyte.gz"), train)
    write_labels(os.path.join(out_dir, "train-labels-idx1-ubyte.gz"), train)
    write_images(os.path.join(out_dir, "t10k-images-idx3-ubyte.gz"), test)
    write_labels(os.path.join(out_dir, "t10k-labels-idx1-ubyte.gz"), test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
