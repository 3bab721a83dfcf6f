#!/usr/bin/env python3
"""Download the MNIST IDX files into data/mnist and verify their checksums.

Usage: python scripts/fetch_mnist.py [--dest data/mnist]
"""

import argparse
import hashlib
import os
import sys
import urllib.error
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://raw.githubusercontent.com/fgnt/mnist/master/",
]

FILES = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}


def fetch(name: str, dest: str) -> bool:
    path = os.path.join(dest, name)
    want = FILES[name]
    if os.path.exists(path):
        got = hashlib.md5(open(path, "rb").read()).hexdigest()
        if got == want:
            print(f"{name}: already present, checksum ok")
            return True
        print(f"{name}: checksum mismatch on existing file, refetching")
    for mirror in MIRRORS:
        url = mirror + name
        try:
            data = urllib.request.urlopen(url, timeout=60).read()
        except (urllib.error.URLError, OSError) as e:
            print(f"{name}: {url} failed ({e})")
            continue
        got = hashlib.md5(data).hexdigest()
        if got != want:
            print(f"{name}: bad checksum from {url} ({got} != {want})")
            continue
        with open(path, "wb") as fh:
            fh.write(data)
        print(f"{name}: fetched from {url} ({len(data)} bytes, checksum ok)")
        return True
    return False


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data/mnist")
    args = parser.parse_args()
    os.makedirs(args.dest, exist_ok=True)
    ok = all(fetch(name, args.dest) for name in FILES)
    if not ok:
        print("some files could not be fetched; download them manually into "
              f"{args.dest} (gzip-compressed IDX, checksums in this script)",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
