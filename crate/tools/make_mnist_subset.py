"""Build the small MNIST IDX fixture used by the desk-scale benchmark.

Source: the `mnist` npm package (v1.1.0), which bundles 1001 grayscale
MNIST digits per class as JSON arrays of intensities in [0, 1].

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-012

Writes gzipped IDX files (magic 2051 / 2049) with 500 training and 100 test
images per class for digits 0, 1 and 2, interleaved by a fixed permutation.
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

CLASSES = (0, 1, 2)
TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100


def load_digits(src: Path, digit: int) -> list[bytes]:
    flat = json.loads((src / f"{digit}.json").read_text())["data"]
    images = []
    for start in range(0, len(flat), 784):
        images.append(bytes(round(v * 255) for v in flat[start : start + 784]))
    return images


def write_idx(out: Path, prefix: str, samples: list[tuple[bytes, int]]) -> None:
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for _, label in samples))


def main() -> None:
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in CLASSES:
        images = load_digits(src, digit)
        train += [(img, digit) for img in images[:TRAIN_PER_CLASS]]
        test += [(img, digit) for img in images[TRAIN_PER_CLASS : TRAIN_PER_CLASS + TEST_PER_CLASS]]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
