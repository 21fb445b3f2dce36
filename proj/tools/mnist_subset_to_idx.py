#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped with mlxtend into IDX files.

The subset (mlxtend/data/data/mnist_5k.csv.gz) stores one image per row:
784 pixel intensities in [0, 255] followed by the class label, sorted by
label with 500 images per class. The first --train-per-class images of each
class go to the training split and the rest to the test split; both splits
are written with classes interleaved (0, 1, ..., 9, 0, 1, ...).

Usage:
    pip download --no-deps mlxtend -d /tmp/whl
    python3 tools/mnist_subset_to_idx.py /tmp/whl/mlxtend-*.whl data/mnist5k
"""
import argparse
import gzip
import pathlib
import struct
import zipfile


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", help="mlxtend wheel or mnist_5k.csv.gz")
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    if args.source.endswith(".whl"):
        with zipfile.ZipFile(args.source) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = pathlib.Path(args.source).read_bytes()
    text = gzip.decompress(raw).decode()

    rows = []
    for line in text.splitlines():
        values = [int(float(v)) for v in line.split(",")]
        rows.append((values[:784], values[784]))

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_class = {}
    for row in rows:
        by_class.setdefault(row[1], []).append(row)
    classes = sorted(by_class)
    k = args.train_per_class
    train = [by_class[c][i] for i in range(k) for c in classes]
    test = [by_class[c][i] for i in range(k, min(len(v) for v in by_class.values())) for c in classes]
    write_images(out / "train-images-idx3-ubyte", train)
    write_labels(out / "train-labels-idx1-ubyte", train)
    write_images(out / "t10k-images-idx3-ubyte", test)
    write_labels(out / "t10k-labels-idx1-ubyte", test)
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
