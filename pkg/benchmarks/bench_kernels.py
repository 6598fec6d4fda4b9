"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import math
import timeit

import numpy as np

from dpmoe.kernels import implementations

CASES = [
    # (tokens, experts, cf, width)
    (256, 4, 1.25, 16),
    (4096, 8, 1.25, 32),
    (32768, 8, 1.0, 32),
]


def make_inputs(n_tokens, n_experts, cf, width, seed=0):
    rng = np.random.default_rng(seed)
    experts = rng.integers(0, n_experts, size=n_tokens).astype(np.int64)
    capacity = max(1, math.ceil(cf * n_tokens / n_experts))
    n_samples = max(1, n_tokens // 8)
    dy = rng.standard_normal((capacity, width))
    x = rng.standard_normal((capacity, width))
    owner = np.sort(rng.integers(0, n_samples, size=capacity)).astype(np.int64)
    return experts, capacity, dy, x, owner, n_samples


def bench(repeat):
    impls = implementations()
    rows = []
    for n_tokens, n_experts, cf, width in CASES:
        experts, capacity, dy, x, owner, n_samples = make_inputs(n_tokens, n_experts, cf, width)
        for name, mod in impls.items():
            t_assign = min(timeit.repeat(lambda: mod.fcfs_assign(experts, n_experts, capacity),
                                         number=3, repeat=repeat)) / 3
            t_outer = min(timeit.repeat(lambda: mod.segment_outer_sum(dy, x, owner, n_samples),
                                        number=3, repeat=repeat)) / 3
            rows.append({"impl": name, "tokens": n_tokens, "experts": n_experts, "width": width,
                         "fcfs_assign_ms": 1e3 * t_assign, "segment_outer_sum_ms": 1e3 * t_outer})
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rows = bench(args.repeat)
    print(f"{'impl':8s} {'tokens':>7s} {'E':>3s} {'width':>5s} {'fcfs_assign ms':>15s} {'outer_sum ms':>13s}")
    for r in rows:
        print(f"{r['impl']:8s} {r['tokens']:7d} {r['experts']:3d} {r['width']:5d} "
              f"{r['fcfs_assign_ms']:15.4f} {r['segment_outer_sum_ms']:13.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
