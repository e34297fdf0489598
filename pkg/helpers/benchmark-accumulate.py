"""
Times the single accumulation pass at n and 10n samples and prints the ratio.
Linear growth means a ratio close to 10.
"""

import argparse
import os
import sys
import time

import numpy as np
from tqdm import tqdm

PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, PROJECT_ROOT)

from spec_compare.io_model import EmbeddingSet, pair
from spec_compare.kernels import KernelSpec, build_feature_map
from spec_compare.spec_core import accumulate


def time_accumulate(n, d, chunk_size, repeats, seed):
    rng = np.random.default_rng(seed)
    emb = EmbeddingSet.from_array(rng.standard_normal((n, d)))
    paired = pair(emb, emb)
    linear = build_feature_map(KernelSpec(kind="linear"), d)

    best = np.inf
    for _ in tqdm(range(repeats), desc=f"n={n}", leave=False):
        started = time.perf_counter()
        accumulate(paired, linear, linear, chunk_size=chunk_size)
        best = min(best, time.perf_counter() - started)
    return best


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Accumulation scaling benchmark")
    parser.add_argument("--n", type=int, default=20_000)
    parser.add_argument("--d", type=int, default=512)
    parser.add_argument("--chunk-size", type=int, default=4096)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    small = time_accumulate(args.n, args.d, args.chunk_size, args.repeats, args.seed)
    large = time_accumulate(10 * args.n, args.d, args.chunk_size, args.repeats, args.seed)

    print(f"[INFO] n={args.n}: {small:.3f}s")
    print(f"[INFO] n={10 * args.n}: {large:.3f}s")
    print(f"[OK] ratio {large / small:.2f} (linear growth -> ~10)")
