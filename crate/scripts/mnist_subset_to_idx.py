#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into
gzipped IDX files readable by `bido::data::load_mnist_idx`.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    images = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        images.extend(min(255, max(0, round(v * 255))) for v in data)
        labels.extend([digit] * (len(data) // 784))
    count = len(labels)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        f.write(images)
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, count))
        f.write(labels)
    print(f"wrote {count} samples to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
