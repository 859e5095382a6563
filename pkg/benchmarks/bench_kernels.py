"""Timing comparison of the model's execution routes.

Routes:
  graph        define-by-run autodiff (reference, per sample)
  numpy        pure-Python per-sample kernel (fallback backend)
  compiled     Cython per-sample kernel (when built)
  slab         shared batched engine (the training path)

Run:  python benchmarks/bench_kernels.py [--batch 256] [--repeat 5]
"""

import argparse
import time

import numpy as np

from newstrend import kernels
from newstrend.model import HyperParams, _flags, _packed, graph_loss_and_grads, init_params


def make_workload(batch, rng):
    hyper = HyperParams(dim=32, hidden=32, n_days=10, att_dim=32, mlp_hidden=(64, 32))
    params = init_params(hyper, seed=1)
    windows = [
        [rng.normal(size=(int(rng.integers(1, 7)), hyper.dim)) * 0.01 for _ in range(hyper.n_days)]
        for _ in range(batch)
    ]
    labels = [i % 3 for i in range(batch)]
    return hyper, params, windows, labels


def time_per_sample(fn, batch, repeat):
    fn()  # warm up
    best = min(_timed(fn) for _ in range(repeat))
    return best / batch * 1e6


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--graph-samples", type=int, default=16,
                    help="graph route is slow; time this many samples only")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    hyper, params, windows, labels = make_workload(args.batch, rng)
    packed, flags = _packed(params), _flags(hyper)
    weights = [1.0] * args.batch

    rows = []
    g_n = min(args.graph_samples, args.batch)
    rows.append((
        "graph", "fwd+bwd",
        time_per_sample(
            lambda: [graph_loss_and_grads(w, l, params) for w, l in zip(windows[:g_n], labels[:g_n])],
            g_n, args.repeat,
        ),
    ))
    for name in kernels.available():
        mod = kernels.get(name)
        rows.append((
            name, "fwd",
            time_per_sample(
                lambda m=mod: [m.run_sample(w, -1, False, flags, packed) for w in windows],
                args.batch, args.repeat,
            ),
        ))
        rows.append((
            name, "fwd+bwd",
            time_per_sample(
                lambda m=mod: [m.run_sample(w, l, True, flags, packed) for w, l in zip(windows, labels)],
                args.batch, args.repeat,
            ),
        ))
    rows.append((
        "slab", "fwd",
        time_per_sample(lambda: kernels.batch_losses(windows, labels, flags, packed),
                        args.batch, args.repeat),
    ))
    rows.append((
        "slab", "fwd+bwd",
        time_per_sample(lambda: kernels.batch_grads(windows, labels, weights, flags, packed),
                        args.batch, args.repeat),
    ))

    print(f"dim=32 hidden=32 days=10 batch={args.batch} (us per sample, best of {args.repeat})")
    print(f"{'route':<10}{'pass':<10}{'us/sample':>12}")
    for route, tag, us in rows:
        print(f"{route:<10}{tag:<10}{us:>12.1f}")


if __name__ == "__main__":
    main()
