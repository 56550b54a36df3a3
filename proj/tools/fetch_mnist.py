#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the digits bundled with mlxtend.

The mlxtend wheel ships 5,000 MNIST training digits (500 per class) as a
gzipped CSV. This script downloads the wheel through pip, shuffles the digits
with a fixed seed and writes a 4,000-sample train split and a 1,000-sample
test split using the standard IDX file names.

    python3 tools/fetch_mnist.py data/mnist
"""
import argparse
import csv
import gzip
import io
import pathlib
import random
import struct
import subprocess
import sys
import tempfile
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def download_wheel(workdir):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
         "--dest", workdir, "mlxtend==0.24.0"],
        check=True)
    wheels = list(pathlib.Path(workdir).glob("mlxtend-*.whl"))
    if not wheels:
        raise SystemExit("pip did not produce an mlxtend wheel")
    return wheels[0]


def read_digits(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(CSV_MEMBER)).decode("ascii")
    rows = []
    for rec in csv.reader(io.StringIO(raw)):
        pixels = bytes(int(v) for v in rec[:-1])
        assert len(pixels) == 784
        rows.append((pixels, int(rec[-1])))
    return rows


def write_idx(out_dir, prefix, rows):
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(pixels)
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--wheel", type=pathlib.Path,
                    help="use an already downloaded mlxtend wheel")
    ap.add_argument("--test-size", type=int, default=1000)
    args = ap.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or download_wheel(tmp)
        rows = read_digits(wheel)
    random.Random(20240607).shuffle(rows)
    write_idx(args.out_dir, "t10k", rows[:args.test_size])
    write_idx(args.out_dir, "train", rows[args.test_size:])
    print(f"wrote {len(rows) - args.test_size} train / {args.test_size} test "
          f"digits to {args.out_dir}")


if __name__ == "__main__":
    main()
