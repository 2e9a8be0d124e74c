#!/usr/bin/env python3
"""Build the desk-scale MNIST subset in IDX format.

Source: the 5000-image MNIST sample bundled with the `mlxtend` wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit, 784 pixel columns
followed by the label). A seeded permutation picks 2000 training and 1000
test images, written as gzipped IDX files with the standard magic numbers.

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-subset
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_images(path, images):
    n = images.shape[0]
    header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + labels.astype(np.uint8).tobytes())


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels, labels = table[:, :784], table[:, 784]
    order = np.random.default_rng(20211115).permutation(len(labels))
    train, test = order[:2000], order[2000:3000]
    write_images(f"{out_dir}/train-images-idx3-ubyte.gz", pixels[train])
    write_labels(f"{out_dir}/train-labels-idx1-ubyte.gz", labels[train])
    write_images(f"{out_dir}/t10k-images-idx3-ubyte.gz", pixels[test])
    write_labels(f"{out_dir}/t10k-labels-idx1-ubyte.gz", labels[test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
