"""Write the bundled CSV datasets under data/.

* ``iris.csv`` / ``iris_labels.csv`` from scikit-learn's copy of the iris data.
* ``mnist123.csv`` / ``mnist123_labels.csv``: 1000 images of digits 1, 2 and 3
  (334/333/333) from the 5000-image MNIST sample shipped inside the ``mlxtend``
  wheel, flattened to 784 columns and scaled to [0, 1].

Usage::

    pip download --no-deps -d /tmp/wheels mlxtend
    python scripts/make_datasets.py --mlxtend-wheel /tmp/wheels/mlxtend-*.whl
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
MNIST_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_matrix(path, x, header=None, fmt="%.6g"):
    with open(path, "w", newline="\n") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in x:
            fh.write(",".join(fmt % v for v in row) + "\n")


def make_iris(out):
    from sklearn.datasets import load_iris

    iris = load_iris()
    names = [n.replace(" (cm)", "").replace(" ", "_") for n in iris.feature_names]
    write_matrix(out / "iris.csv", iris.data, header=names)
    write_matrix(out / "iris_labels.csv", iris.target[:, None], header=["label"], fmt="%d")


def load_mnist_5k(wheel):
    if wheel:
        with zipfile.ZipFile(wheel) as zf:
            raw = gzip.decompress(zf.read(MNIST_MEMBER))
    else:
        import mlxtend.data.mnist as m

        raw = Path(m.DATA_PATH).read_bytes()
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    return table[:, :-1], table[:, -1].astype(int)


def make_mnist(out, wheel, n_rows=1000, digits=(1, 2, 3)):
    x, y = load_mnist_5k(wheel)
    # the source file is grouped by label, so take a balanced share per digit
    shares = [n_rows // len(digits) + (i < n_rows % len(digits)) for i in range(len(digits))]
    keep = np.sort(np.concatenate([np.flatnonzero(y == dgt)[:n] for dgt, n in zip(digits, shares)]))
    write_matrix(out / "mnist123.csv", x[keep] / 255.0)
    write_matrix(out / "mnist123_labels.csv", y[keep][:, None], header=["label"], fmt="%d")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--mlxtend-wheel", default=None, help="path to an mlxtend wheel (else the installed package)")
    parser.add_argument("--out", default=str(ROOT / "data"))
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    make_iris(out)
    make_mnist(out, args.mlxtend_wheel)


if __name__ == "__main__":
    main()
