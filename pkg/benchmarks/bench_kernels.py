"""Time every hot kernel under the numba and the numpy backend.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel: best-of-N wall time for each backend and the
speed-up.  The numba column is skipped when numba is unavailable or
HNPIPE_DISABLE_NUMBA is set.
"""
import argparse
import time

import numpy as np

from hnpipe import kernels
from hnpipe.trees import GBTConfig, fit_gbt


def cases(rng):
    chans = rng.uniform(0, 255, size=(2, 64, 64))
    x = rng.uniform(size=(64 * 64, 8))
    gt = rng.integers(0, 3, 64 * 64)
    w, b = rng.normal(size=(3, 8)), rng.normal(size=3)
    w4 = [rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(3, 4)), rng.normal(size=3)]
    wf, bf = rng.normal(size=(3, 6)), rng.normal(size=3)
    vol = rng.normal(size=(64, 64, 32))
    pts = [np.linspace(0, n - 1, m) for n, m in ((64, 100), (64, 100), (32, 50))]
    xs = np.sort(rng.normal(size=2000))
    ys, hs = rng.normal(size=2000), np.ones(2000)
    s, t = rng.normal(size=500), rng.uniform(0, 3000, 500)
    e = (rng.random(500) < 0.8).astype(np.float64)
    X = rng.normal(size=(200, 14))
    X[rng.random(X.shape) < 0.1] = np.nan
    tree = fit_gbt(X, rng.normal(size=200) * 100, GBTConfig(n_estimators=1, max_depth=4)).trees[0]
    arrs = (tree.feature, tree.threshold, tree.default_left, tree.left, tree.right, tree.value)
    th = np.deg2rad(13.0)
    return {
        "pixel_features 2x64x64": ("pixel_features", (chans, 255.0, np.empty((64, 64, 8)))),
        "rotate 64x64": ("rotate", (chans[0], np.cos(th), np.sin(th), 0.0, False)),
        "dice_head_grad 4096px": ("dice_head_grad", (x, gt, w, b, 1.0)),
        "dice_fusion_grad 4096px": ("dice_fusion_grad", (x, gt, *w4, wf, bf, 1.0)),
        "head_probs 4096px": ("head_probs", (x, w, b)),
        "fusion_probs 4096px": ("fusion_probs", (x, *w4, wf, bf)),
        "trilinear 100x100x50": ("trilinear", (vol, *pts)),
        "best_split_sse 2000": ("best_split_sse", (xs, ys, 0.0, 0.0)),
        "best_split_newton 2000": ("best_split_newton", (xs, ys, hs, 0.0, 0.0, 1.0, 1.0)),
        "concordance 500": ("concordance_counts", (s, t, e)),
        "tree_predict 200 rows": ("tree_predict", arrs + (X,)),
        "tree_shap 200 rows": ("tree_shap", arrs + (tree.cover, tree.depth(), X, np.zeros(X.shape))),
    }


def best_time(fn, args, repeat):
    fn(*args)  # warm-up, includes numba compilation
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    nb = kernels.numba_kernels
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for label, (name, args) in cases(np.random.default_rng(a.seed)).items():
        t_np = best_time(getattr(kernels.numpy_kernels, name), args, a.repeat)
        if nb is None:
            print(f"{label:<26}{t_np * 1e3:>12.3f}{'-':>12}{'-':>10}")
            continue
        t_nb = best_time(getattr(nb, name), args, a.repeat)
        print(f"{label:<26}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
