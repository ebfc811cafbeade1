"""Time the similarity-sorted scan on a full-size (30^4, 16) sequence.

Throughput is recorded, not gated: the number depends on the host CPU.
"""
import argparse
import time

import numpy as np

from corrscan import CorrelationMap, Tensor, init_ssm_params, no_grad, similarity_aware_scan


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--hw", type=int, default=30)
    ap.add_argument("--levels", type=int, default=16)
    ap.add_argument("--chunk", type=int, default=8192)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    s = args.hw
    corr = CorrelationMap(Tensor(
        rng.standard_normal((args.levels, s, s, s, s)).astype(np.float32)
    ))
    params = init_ssm_params(args.levels, seed=1, requires_grad=False)
    n = s * s * s * s
    with no_grad():
        similarity_aware_scan(corr, params, chunk=args.chunk)  # warm the kernels
        for r in range(args.repeats):
            t0 = time.time()
            similarity_aware_scan(corr, params, chunk=args.chunk)
            dt = time.time() - t0
            print(f"run {r}: n={n} d_model={args.levels} chunk={args.chunk} "
                  f"{dt:.3f} s ({n / dt / 1e6:.2f} Msteps/s)")


if __name__ == "__main__":
    main()
