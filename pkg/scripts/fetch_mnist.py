#!/usr/bin/env python3
"""Download the MNIST IDX files into data/mnist/ (or $PCDEFENSE_DATA_ROOT/mnist).

The package itself never touches the network; run this once wherever network
access exists, then copy the directory into air-gapped environments.
"""

import os
import sys
import urllib.request
from pathlib import Path

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def main() -> int:
    root = Path(os.environ.get("PCDEFENSE_DATA_ROOT", Path(__file__).resolve().parent.parent / "data"))
    out = root / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        dest = out / name
        if dest.exists():
            print(f"already present: {dest}")
            continue
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"fetching {url}")
                urllib.request.urlretrieve(url, dest)
                break
            except OSError as e:
                print(f"  failed: {e}")
        else:
            print(f"could not fetch {name} from any mirror", file=sys.stderr)
            return 1
    print(f"done; files in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
