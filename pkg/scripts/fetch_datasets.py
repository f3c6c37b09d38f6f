"""Build the small IDX subsets under data/ used by the MNIST acceptance run.

MNIST comes from the ``mnist-hub`` wheel on PyPI, which ships the classic
pickle with pixels stored as ``byte / 256``. FashionMNIST comes from the
``fashion-mnist`` npm package, which stores raw byte values per class as JSON.
Both archives are cached under ``--cache`` so reruns stay offline.

    python3 scripts/fetch_datasets.py --out data
"""
from __future__ import annotations

import argparse
import gzip
import hashlib
import io
import json
import pickle
import tarfile
import urllib.request
import zipfile
from pathlib import Path

import numpy as np

from tie.data import write_idx_images, write_idx_labels

PYPI_JSON = "https://pypi.org/pypi/mnist-hub/json"
NPM_TARBALL = "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz"

MNIST_TRAIN = 5000
MNIST_TEST = 2000
FASHION_PER_CLASS = 200


def _download(url, dest: Path, timeout: float = 600.0) -> Path:
    """Fetch ``url`` (a string or a zero-argument resolver) unless ``dest`` is cached."""
    if dest.exists():
        return dest
    if callable(url):
        url = url()
    dest.parent.mkdir(parents=True, exist_ok=True)
    print(f"downloading {url}")
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        payload = resp.read()
    dest.write_bytes(payload)
    return dest


def _wheel_url() -> str:
    with urllib.request.urlopen(PYPI_JSON, timeout=60) as resp:
        meta = json.load(resp)
    for f in meta["releases"].get("0.1.4", []):
        if f["filename"].endswith(".whl"):
            return f["url"]
    raise RuntimeError("mnist-hub 0.1.4 has no wheel on the index")


def load_mnist(cache: Path):
    wheel = _download(_wheel_url, cache / "mnist_hub-0.1.4.whl")
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mnist/data/mnist.pkl.gz")
    train, _valid, test = pickle.load(gzip.open(io.BytesIO(raw)), encoding="latin1")

    def to_bytes(split):
        x, y = split
        px = np.rint(np.asarray(x, dtype=np.float64) * 256.0)
        if px.min() < 0 or px.max() > 255:
            raise ValueError("unexpected MNIST pixel encoding")
        return px.astype(np.uint8).reshape(-1, 28, 28), np.asarray(y, dtype=np.uint8)

    return to_bytes(train), to_bytes(test)


def load_fashion(cache: Path, per_class: int):
    tgz = _download(NPM_TARBALL, cache / "fashion-mnist-1.1.0.tgz")
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for c in range(10):
            data = json.load(tar.extractfile(f"package/src/clothes/{c}.json"))["data"]
            arr = np.asarray(data[:per_class], dtype=np.int64)
            if arr.shape[1:] != (784,) or arr.min() < 0 or arr.max() > 255:
                raise ValueError(f"unexpected FashionMNIST layout for class {c}")
            images.append(arr.astype(np.uint8).reshape(-1, 28, 28))
            labels.append(np.full(len(arr), c, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--cache", default=str(Path.home() / ".cache" / "tie-datasets"))
    args = ap.parse_args(argv)
    out, cache = Path(args.out), Path(args.cache)

    (xtr, ytr), (xte, yte) = load_mnist(cache)
    xf, yf = load_fashion(cache, FASHION_PER_CLASS)
    files = {
        "mnist-train-images.idx3-ubyte.gz": (write_idx_images, xtr[:MNIST_TRAIN]),
        "mnist-train-labels.idx1-ubyte.gz": (write_idx_labels, ytr[:MNIST_TRAIN]),
        "mnist-test-images.idx3-ubyte.gz": (write_idx_images, xte[:MNIST_TEST]),
        "mnist-test-labels.idx1-ubyte.gz": (write_idx_labels, yte[:MNIST_TEST]),
        "fashion-images.idx3-ubyte.gz": (write_idx_images, xf),
        "fashion-labels.idx1-ubyte.gz": (write_idx_labels, yf),
    }
    for name, (writer, arr) in files.items():
        writer(out / name, arr)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        print(f"{name}  {len(arr):6d} items  sha256={digest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
