"""Time the fused LatticeLSTM layer kernels: numba-compiled vs plain numpy.

    python benchmarks/bench_kernels.py [--nodes 60] [--hidden 64] [--batch 1] [--repeat 20]

Both variants run the same source; the numba one is skipped when numba is
not installed or ``LAT2SEQ_NUMBA=0`` is set.
"""

import argparse
import time

import numpy as np

from lat2seq import kernels


def random_layer(rng, n, B, H, max_preds=3):
    ptr, pred = [0], []
    for p in range(n):
        if p:
            k = int(rng.integers(1, min(p, max_preds) + 1))
            pred += sorted(rng.choice(p, size=k, replace=False).tolist())
        ptr.append(len(pred))
    E = len(pred)
    return (rng.normal(size=(n, B, 4 * H)), rng.normal(scale=0.3, size=(4 * H, H)), np.array(ptr),
            np.array(pred), rng.uniform(0.1, 1.0, (E, H)), rng.normal(size=(E, H)))


def bench(use_numba, args, layer, repeat):
    px, U, ptr, pred, wh, bf = layer
    # warm-up (compilation for numba)
    h, c, cache = kernels.lattice_lstm_forward(px, U, ptr, pred, wh, bf, use_numba=use_numba)
    kernels.lattice_lstm_backward(h, c, cache, ptr, pred, wh, use_numba=use_numba)
    t0 = time.perf_counter()
    for _ in range(repeat):
        h, c, cache = kernels.lattice_lstm_forward(px, U, ptr, pred, wh, bf, use_numba=use_numba)
    t1 = time.perf_counter()
    for _ in range(repeat):
        kernels.lattice_lstm_backward(h, c, cache, ptr, pred, wh, use_numba=use_numba)
    t2 = time.perf_counter()
    return (t1 - t0) / repeat, (t2 - t1) / repeat, h


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--nodes", type=int, default=60)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    layer = random_layer(np.random.default_rng(args.seed), args.nodes, args.batch, args.hidden)
    variants = [("numpy", False)]
    if kernels.USE_NUMBA:
        variants.insert(0, ("numba", True))
    else:
        print("numba disabled or missing: timing the numpy kernels only")
    results = {}
    print(f"nodes={args.nodes} hidden={args.hidden} batch={args.batch} edges={len(layer[3])}")
    print(f"{'kernel':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for name, flag in variants:
        fwd, bwd, h = bench(flag, args, layer, args.repeat)
        results[name] = h
        print(f"{name:8s} {1e3 * fwd:11.3f} {1e3 * bwd:12.3f}")
    if len(results) == 2:
        print(f"max |h_numba - h_numpy| = {np.abs(results['numba'] - results['numpy']).max():.1e}")


if __name__ == "__main__":
    main()
