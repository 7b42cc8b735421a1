#!/usr/bin/env python3
"""Download the four official MNIST IDX files into data/mnist/.

The core library never touches the network; this helper exists so the
desk-scale experiments can run against the real dataset when connectivity
allows.  Files are written uncompressed so jcert can read them directly:

    python3 scripts/fetch_mnist.py [--dest data/mnist]

Afterwards point the CLI at them (``--data idx:data/mnist``) or set
``JCERT_MNIST_DIR`` for the acceptance suite.
"""

import argparse
import gzip
import os
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def fetch(name: str, dest: str) -> None:
    target = os.path.join(dest, name)
    if os.path.exists(target):
        print(f"{name}: already present")
        return
    last_error = None
    for mirror in MIRRORS:
        url = mirror + name + ".gz"
        try:
            print(f"{name}: fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as response:
                payload = gzip.decompress(response.read())
            with open(target, "wb") as handle:
                handle.write(payload)
            return
        except OSError as exc:
            last_error = exc
            print(f"  mirror failed: {exc}")
    raise SystemExit(f"could not fetch {name}: {last_error}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data/mnist")
    args = parser.parse_args()
    os.makedirs(args.dest, exist_ok=True)
    for name in FILES:
        fetch(name, args.dest)
    print("done")


if __name__ == "__main__":
    main()
