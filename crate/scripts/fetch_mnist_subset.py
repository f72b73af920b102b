"""Write a small MNIST subset as IDX files.

The 5000-digit sample bundled with the `mlxtend` wheel is split into a
stratified train part (400 per class) and a held-out part (100 per class).
Usage: python3 scripts/fetch_mnist_subset.py [OUT_DIR]   (default: data/mnist)
"""
import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np


def load_csv():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "mlxtend"],
            check=True,
        )
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    data = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    return data[:, :-1].astype(np.uint8), data[:, -1].astype(np.uint8)


def write_images(path, x):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(x), 28, 28))
        f.write(x.astype(np.uint8).tobytes())


def write_labels(path, y):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.astype(np.uint8).tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    x, y = load_csv()
    rng = np.random.default_rng(42)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test.extend(idx[:100])
        train.extend(idx[100:])
    train = rng.permutation(np.array(train))
    test = rng.permutation(np.array(test))
    write_images(out / "train-images-idx3-ubyte", x[train])
    write_labels(out / "train-labels-idx1-ubyte", y[train])
    write_images(out / "t10k-images-idx3-ubyte", x[test])
    write_labels(out / "t10k-labels-idx1-ubyte", y[test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


if __name__ == "__main__":
    main()
