#!/usr/bin/env python3
"""Build the desk-scale IDX digit fixture from the npm `mnist` package.

The npm package (MIT, `npm pack mnist`) ships 10000 MNIST digits as
normalized 28x28 float arrays in src/digits/<d>.json. This script takes the
first TRAIN_PER_CLASS samples of each digit for training and the next
TEST_PER_CLASS for testing, center-pads them to 32x32 and writes IDX files.

usage: make_digit_fixture.py <path/to/package/src/digits> <out_dir>
"""
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 50
SRC_SIDE = 28
SIDE = 32


def load_digit(digits_dir: Path, digit: int):
    data = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
    n = len(data) // (SRC_SIDE * SRC_SIDE)
    out = []
    for k in range(n):
        flat = data[k * SRC_SIDE * SRC_SIDE:(k + 1) * SRC_SIDE * SRC_SIDE]
        out.append([max(0, min(255, round(v * 255))) for v in flat])
    return out


def pad(img):
    off = (SIDE - SRC_SIDE) // 2
    canvas = bytearray(SIDE * SIDE)
    for y in range(SRC_SIDE):
        for x in range(SRC_SIDE):
            canvas[(y + off) * SIDE + x + off] = img[y * SRC_SIDE + x]
    return bytes(canvas)


def write_idx(out_dir: Path, stem: str, images, labels):
    with open(out_dir / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(out_dir / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    per_digit = [load_digit(digits_dir, d) for d in range(10)]
    # interleave classes so unshuffled prefixes stay balanced
    train = [(pad(per_digit[d][k]), d) for k in range(TRAIN_PER_CLASS) for d in range(10)]
    test = [
        (pad(per_digit[d][TRAIN_PER_CLASS + k]), d)
        for k in range(TEST_PER_CLASS)
        for d in range(10)
    ]
    write_idx(out_dir, "train", [p[0] for p in train], [p[1] for p in train])
    write_idx(out_dir, "test", [p[0] for p in test], [p[1] for p in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out_dir}")


if __name__ == "__main__":
    main()
