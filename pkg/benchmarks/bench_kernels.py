"""Time each numpy kernel against its numba twin.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes match one training batch of the acceptance config (8 scans, 21
instances, T=64, d_model=32). Both versions are checked for agreement
before timing; the first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from slmil import kernels


def _cases(rng):
    rows = 8 * 21 * 64
    x = rng.standard_normal((rows, 32))
    gain, bias = rng.standard_normal(32), rng.standard_normal(32)
    y, xhat, rstd = kernels.layer_norm_fwd_numpy(x, gain, bias, 1e-5)
    scores = rng.standard_normal((8 * 21 * 2 * 64, 64))
    p = kernels.softmax_rows_numpy(scores)
    series = rng.standard_normal((100, 200))
    return {
        "layer_norm_fwd": (x, gain, bias, 1e-5),
        "layer_norm_bwd": (rng.standard_normal(x.shape), xhat, rstd, gain),
        "gelu_fwd": (x,),
        "gelu_bwd": (x, rng.standard_normal(x.shape)),
        "softmax_rows": (scores,),
        "softmax_rows_bwd": (p, rng.standard_normal(p.shape)),
        "pearson_fc": (series,),
        "midranks": (np.round(rng.standard_normal(5000), 1),),
    }


def _best(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(u, v, rtol=1e-10, atol=1e-12) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, case in _cases(rng).items():
        np_fn, nb_fn = kernels.implementations(name)
        if not _same(np_fn(*case), nb_fn(*case)):  # also triggers compilation
            raise SystemExit(f"{name}: numpy and numba disagree")
        t_np = _best(np_fn, case, args.repeat)
        t_nb = _best(nb_fn, case, args.repeat)
        print(f"{name:<18}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
