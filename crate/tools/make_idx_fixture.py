"""Writes a tiny IDX image/label pair used by the loader tests."""
import gzip
import struct
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"

# Three 2x3 images; pixel value = 40 * image + 10 * row + col.
images = [[[40 * n + 10 * r + c for c in range(3)] for r in range(2)] for n in range(3)]
labels = [7, 0, 3]


def idx_images(imgs):
    h, w = len(imgs[0]), len(imgs[0][0])
    body = bytes(v for img in imgs for row in img for v in row)
    return struct.pack(">IIII", 0x00000803, len(imgs), h, w) + body


def idx_labels(ls):
    return struct.pack(">II", 0x00000801, len(ls)) + bytes(ls)


OUT.mkdir(parents=True, exist_ok=True)
(OUT / "tiny-images-idx3-ubyte").write_bytes(idx_images(images))
(OUT / "tiny-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_labels(labels), mtime=0))
