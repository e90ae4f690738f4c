"""Export the 5000-image MNIST sample shipped with mlxtend as IDX files.

Usage::

    python -m fmselect.bundled OUT_DIR

writes ``mnist5k-images-idx3-ubyte``, ``mnist5k-labels-idx1-ubyte`` and a
``datasets.json`` registry with an ``mnist`` entry pointing at them. If full
MNIST IDX files are found in ``$FMSELECT_MNIST_DIR`` the registry points at
those instead.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import numpy as np

from .data_io import write_idx

FULL_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_full_mnist(directory=None) -> dict | None:
    directory = directory or os.environ.get("FMSELECT_MNIST_DIR")
    if not directory:
        return None
    found = {}
    for key, stem in FULL_MNIST_FILES.items():
        for cand in (Path(directory) / stem, Path(directory) / (stem + ".gz")):
            if cand.exists():
                found[key] = str(cand)
                break
        else:
            return None
    return found


def export_mnist5k(out_dir) -> dict:
    from mlxtend.data import mnist_data

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / "mnist5k-images-idx3-ubyte"
    labels_path = out_dir / "mnist5k-labels-idx1-ubyte"
    if not (images_path.exists() and labels_path.exists()):
        x, y = mnist_data()
        write_idx(x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8),
                  images_path, labels_path)
    return {"format": "idx", "train_images": str(images_path),
            "train_labels": str(labels_path), "n_classes": 10}


def write_registry(out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = find_full_mnist()
    entry = {"format": "idx", "n_classes": 10, **full} if full else export_mnist5k(out_dir)
    path = out_dir / "datasets.json"
    path.write_text(json.dumps({"mnist": entry}, indent=2) + "\n")
    return path


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m fmselect.bundled OUT_DIR")
    print(write_registry(sys.argv[1]))
