"""Build a small MNIST train/test split in IDX format.

Full MNIST IDX files, when available, can be dropped straight into the data
directory instead.  Without them this script uses one of two digit samples
that ship inside ordinary packages:

  npm      10 000 digits (the first 10k of the MNIST training set) from the
           ``mnist`` npm package; the default.  Gives 8000 train / 2000 test.
  mlxtend  5000 digits bundled with the ``mlxtend`` wheel.
           Gives 4000 train / 1000 test.

The test split is a fixed 20% per class, drawn with seed 0.  Output:

    data/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz

Usage: python scripts/prepare_mnist_subset.py [--source npm|mlxtend] [--from PATH] [--out DIR]
"""

import argparse
import glob
import gzip
import io
import json
import subprocess
import sys
import tarfile
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from sgrlab.data import data_dir, write_idx

MLXTEND_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
NPM_SPEC = "mnist@1.1.0"


def fetch(source: str) -> Path:
    """Download the package archive into a temp dir and return its path (caller keeps the dir)."""
    tmp = Path(tempfile.mkdtemp())
    if source == "npm":
        subprocess.run(["npm", "pack", NPM_SPEC, "--silent"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
        return next(tmp.glob("mnist-*.tgz"))
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "mlxtend==0.24.0", "-d", str(tmp)],
                   check=True)
    return Path(glob.glob(f"{tmp}/mlxtend-*.whl")[0])


def read_npm(archive: Path):
    pixels, labels = [], []
    with tarfile.open(archive) as tf:
        for k in range(10):
            data = json.load(tf.extractfile(f"package/src/digits/{k}.json"))["data"]
            # stored as v/255 rounded to 3 decimals; rint recovers the byte exactly
            arr = np.rint(np.asarray(data, dtype=np.float64) * 255).astype(np.uint8).reshape(-1, 28, 28)
            pixels.append(arr)
            labels.append(np.full(len(arr), k, dtype=np.uint8))
    return np.concatenate(pixels), np.concatenate(labels)


def read_mlxtend(archive: Path):
    with zipfile.ZipFile(archive) as zf:
        blob = zf.read(MLXTEND_MEMBER)
    table = np.loadtxt(io.BytesIO(gzip.decompress(blob)), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--source", choices=("npm", "mlxtend"), default="npm")
    ap.add_argument("--from", dest="archive", help="already downloaded .tgz / .whl (skips the download)")
    ap.add_argument("--out", default=None, help="output directory (default: <data dir>/mnist)")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    args = ap.parse_args()

    archive = Path(args.archive) if args.archive else fetch(args.source)
    pixels, labels = (read_npm if args.source == "npm" else read_mlxtend)(archive)

    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for k in range(10):
        members = rng.permutation(np.nonzero(labels == k)[0])
        n_test = int(round(args.test_fraction * len(members)))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    out = Path(args.out) if args.out else data_dir() / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", pixels[train_idx])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte.gz", pixels[test_idx])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {out}")


if __name__ == "__main__":
    main()
