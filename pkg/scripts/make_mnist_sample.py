"""Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

The files land in ``$DATA_DIR/mnist-sample`` (or ``--out``) and load with
``vic.data.load_dataset("mnist-sample")``: 400 training and 100 test images
per class, in the standard IDX layout.
"""

import argparse
import gzip
import os
from pathlib import Path

import numpy as np

from vic.data import write_idx


def mlxtend_sample() -> tuple[np.ndarray, np.ndarray]:
    import mlxtend

    path = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def export(out: Path, test_per_class: int = 100) -> None:
    images, labels = mlxtend_sample()
    test = np.zeros(len(labels), dtype=bool)
    for k in np.unique(labels):
        test[np.flatnonzero(labels == k)[-test_per_class:]] = True
    # the CSV is sorted by class; store each split in a fixed shuffled order, as the
    # real files are, so that --train-limit prefixes still cover every class
    rng = np.random.default_rng(0)
    train_idx = rng.permutation(np.flatnonzero(~test))
    test_idx = rng.permutation(np.flatnonzero(test))
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", images[train_idx])
    write_idx(out / "train-labels-idx1-ubyte", labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte", images[test_idx])
    write_idx(out / "t10k-labels-idx1-ubyte", labels[test_idx])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=Path(os.environ.get("DATA_DIR", "data")) / "mnist-sample", type=Path)
    export(parser.parse_args().out)
