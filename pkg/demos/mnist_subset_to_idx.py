"""Write the 5000-digit MNIST subset bundled with mlxtend as IDX files.

The CLI reads MNIST from the four standard IDX files.  This script turns the
CSV subset into that layout (4000 digits as "train", 1000 as "t10k") so the whole pipeline can run offline:

    python demos/mnist_subset_to_idx.py data/mnist-5k
"""
import argparse
import importlib.util
from pathlib import Path

import numpy as np

from hnext.data import read_mnist_csv, write_idx


def bundled_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise SystemExit("mlxtend is not installed (pip install mlxtend)")
    return Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--train", type=int, default=4000, help="digits kept as the training file")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = read_mnist_csv(bundled_csv())
    # the CSV is sorted by label
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    args.out.mkdir(parents=True, exist_ok=True)
    n = args.train
    write_idx(args.out / "train-images-idx3-ubyte", images[:n])
    write_idx(args.out / "train-labels-idx1-ubyte", labels[:n])
    write_idx(args.out / "t10k-images-idx3-ubyte", images[n:])
    write_idx(args.out / "t10k-labels-idx1-ubyte", labels[n:])
    print(f"{n} train / {len(images) - n} test digits written to {args.out}")


if __name__ == "__main__":
    main()
