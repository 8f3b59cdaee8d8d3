"""Convert a CSV MNIST sample (784 pixel columns then the label) into IDX files.

Usage: python3 tools/make_mnist_subset.py SOURCE.csv[.gz] OUT_DIR [--classes 0,1]

The repository ships ``data/mnist-subset-*.idx.gz`` made this way from the
5000-image sample distributed with mlxtend (``mlxtend/data/data/mnist_5k.csv.gz``,
500 images per digit).
"""

import argparse
import gzip
from pathlib import Path

import numpy as np

from deqflow.data import write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source")
    ap.add_argument("out_dir")
    ap.add_argument("--classes", default=None, help="keep only these digits, e.g. 0,1")
    args = ap.parse_args()
    opener = gzip.open if args.source.endswith(".gz") else open
    with opener(args.source, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    if args.classes:
        keep = np.isin(labels, [int(c) for c in args.classes.split(",")])
        images, labels = images[keep], labels[keep]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist-subset-images.idx3-ubyte.gz", images)
    write_idx(out / "mnist-subset-labels.idx1-ubyte.gz", labels)
    print(f"{len(labels)} images, counts per label: {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
