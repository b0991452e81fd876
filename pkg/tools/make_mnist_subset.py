"""Write an MNIST subset as IDX files from the 5000-image sample bundled with mlxtend.

The bundled CSV is sorted by digit (500 per class); rows are interleaved
round-robin so any prefix of the output is class balanced.

    python3 tools/make_mnist_subset.py OUTDIR [--count 5000]
"""
import argparse
import gzip
import os

import numpy as np


def interleaved_mnist_sample():
    import mlxtend.data

    path = os.path.join(os.path.dirname(mlxtend.data.__file__), "data", "mnist_5k.csv.gz")
    with gzip.open(path, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels, digits = raw[:, :-1], raw[:, -1]
    per_class = [np.flatnonzero(digits == d) for d in range(10)]
    m = min(len(ix) for ix in per_class)
    order = np.stack([ix[:m] for ix in per_class], axis=1).ravel()
    return pixels[order].astype(np.uint8).reshape(-1, 28, 28), digits[order].astype(np.uint8)


def write_idx(outdir, count=None):
    from turnpike_resnet.data import idx_images_bytes, idx_labels_bytes

    images, labels = interleaved_mnist_sample()
    if count is not None:
        images, labels = images[:count], labels[:count]
    os.makedirs(outdir, exist_ok=True)
    img = os.path.join(outdir, "images-idx3-ubyte")
    lab = os.path.join(outdir, "labels-idx1-ubyte")
    with open(img, "wb") as fh:
        fh.write(idx_images_bytes(images))
    with open(lab, "wb") as fh:
        fh.write(idx_labels_bytes(labels))
    return img, lab


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("outdir")
    ap.add_argument("--count", type=int)
    args = ap.parse_args()
    for p in write_idx(args.outdir, args.count):
        print(p)
