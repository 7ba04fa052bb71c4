#!/usr/bin/env python3
"""Convert the npm `mnist` digit JSON files into gzip IDX archives.

Usage: prepare_mnist.py <digits_dir> <out_dir> [--train 8000] [--seed 0]

Each <digit>.json holds {"data": [...]} with 784 floats in [0, 1] per image.
All images are shuffled with a fixed seed, then split into train and test.
"""
import argparse
import gzip
import hashlib
import json
import pathlib
import random
import struct


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    per_digit = []
    for d in range(10):
        flat = json.loads((args.digits_dir / f"{d}.json").read_text())["data"]
        per_digit.append([flat[i : i + 784] for i in range(0, len(flat) - 783, 784)])

    samples = [(im, d) for d in range(10) for im in per_digit[d]]
    random.Random(args.seed).shuffle(samples)

    def split(part):
        return [im for im, _ in part], [d for _, d in part]

    splits = {"train": split(samples[: args.train]), "t10k": split(samples[args.train :])}
    args.out_dir.mkdir(parents=True, exist_ok=True)
    sums = []
    for name, (images, labels) in splits.items():
        pix = bytes(min(255, max(0, round(v * 255))) for im in images for v in im)
        img_path = args.out_dir / f"{name}-images-idx3-ubyte.gz"
        lbl_path = args.out_dir / f"{name}-labels-idx1-ubyte.gz"
        write_idx(img_path, 0x803, [len(images), 28, 28], pix)
        write_idx(lbl_path, 0x801, [len(labels)], bytes(labels))
        for p in (img_path, lbl_path):
            sums.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.name}")
        print(f"{name}: {len(images)} images")
    (args.out_dir / "SHA256SUMS").write_text("\n".join(sums) + "\n")


if __name__ == "__main__":
    main()
