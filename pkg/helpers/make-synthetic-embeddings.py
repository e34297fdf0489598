"""
This script writes a planted embedding pair to disk so the CLI can be tried
end to end without any model inference.

Embedding A separates a block of samples (block_fraction of n) along one
coordinate, embedding B is isotropic noise. The block membership is saved as
a label file (1 = planted, 0 = rest).

NOTE : run `python -m spec_compare compare --emb-a <out>/a.csv --emb-b <out>/b.csv --labels <out>/labels.txt`
afterwards; the top side-A cluster should be the planted block.
"""

import argparse
import os
import sys

import numpy as np

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, PROJECT_ROOT)

from spec_compare.io_model import write_embedding_set
from spec_compare.synthetic import planted_pair

OUTPUT_DIR = "../data/synthetic"


def parse_args():
    parser = argparse.ArgumentParser(description="Write a planted embedding pair")
    parser.add_argument("--out-dir", default=OUTPUT_DIR)
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--d", type=int, default=32)
    parser.add_argument("--block-fraction", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--format", choices=["csv", "binary"], default="csv")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    paired, block = planted_pair(n=args.n, d=args.d, block_fraction=args.block_fraction, seed=args.seed)
    suffix = ".csv" if args.format == "csv" else ".bin"
    for name, emb in (("a", paired.a), ("b", paired.b)):
        write_embedding_set(emb, os.path.join(args.out_dir, name + suffix))

    labels = np.zeros(paired.n, dtype=np.int64)
    labels[block] = 1
    label_path = os.path.join(args.out_dir, "labels.txt")
    with open(label_path, "w") as f:
        f.write("\n".join(str(v) for v in labels) + "\n")

    print(f"[INFO] n={paired.n}, d={args.d}, planted block of {len(block)} samples")
    print(f"[OK] Wrote {args.out_dir}/a{suffix}, {args.out_dir}/b{suffix} and {label_path}")
