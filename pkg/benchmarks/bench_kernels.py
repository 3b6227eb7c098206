"""Time the numba kernels against their numpy twins and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the first encoder stage and one upsampling stage of the
default network on a batch of eight 128x128 tiles.
"""

import argparse
import timeit

import numpy as np

from burnseg import _kernels as K


def _time(fn, repeat):
    fn()  # warm-up (numba compiles or loads its cache here)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, h, w, c = 8, 128, 128, 16
    x = rng.standard_normal((n, h, w, c)).astype(np.float32)
    cols = rng.standard_normal((n * h * w, 9 * c)).astype(np.float32)
    up = rng.standard_normal((n * 64 * 64, 9 * c)).astype(np.float32)
    xp = rng.standard_normal((n, c, h, w)).astype(np.float32)
    g = rng.standard_normal((n, c, h // 2, w // 2)).astype(np.float32)

    cases = {
        "im2col s1": (lambda f: f(x, 1, 1, h, w), K.im2col_np, getattr(K, "im2col_nb", None)),
        "col2im s1": (lambda f: f(cols, (n, h, w, c), 1, 1, h, w), K.col2im_np, getattr(K, "col2im_nb", None)),
        "col2im s2": (lambda f: f(up, (n, h, w, c), 2, 1, 64, 64), K.col2im_np, getattr(K, "col2im_nb", None)),
        "maxpool fwd": (lambda f: f(xp), K.maxpool_fwd_np, getattr(K, "maxpool_fwd_nb", None)),
    }
    _, arg = K.maxpool_fwd_np(xp)
    cases["maxpool bwd"] = (lambda f: f(g, arg), K.maxpool_bwd_np, getattr(K, "maxpool_bwd_nb", None))

    print(f"{'kernel':<12} {'numpy s':>9} {'numba s':>9} {'speedup':>8}  identical")
    for name, (call, f_np, f_nb) in cases.items():
        t_np = _time(lambda: call(f_np), args.repeat)
        if f_nb is None:
            print(f"{name:<12} {t_np:9.4f} {'-':>9} {'-':>8}  -")
            continue
        t_nb = _time(lambda: call(f_nb), args.repeat)
        a, b = call(f_np), call(f_nb)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        print(f"{name:<12} {t_np:9.4f} {t_nb:9.4f} {t_np / t_nb:8.2f}  {same}")


if __name__ == "__main__":
    main()
