"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 20]

Both paths are imported directly, so the NADAPT_DISABLE_NUMBA flag does not
matter here. Each kernel is warmed up once (JIT compile) before timing, and
the outputs of the two paths are checked against each other.
"""
import argparse
import timeit

import numpy as np

from nadapt import _kernels as K
from nadapt.degrade import motion_kernel
from nadapt.imaging import gaussian_window


def cases(size, rng):
    x = rng.uniform(0, 1, (size, size))
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    w = gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    kern = motion_kernel(15, 30.0)
    n = 200
    seg = [rng.uniform(0, size, n) for _ in range(4)]
    op = rng.uniform(0.3, 0.9, n)
    return {
        "ssim_mean": ((x, y, w, c1, c2), K._ssim_mean_nb, K._ssim_mean_np),
        "convolve_reflect": ((x, kern), K._convolve_reflect_nb, K._convolve_reflect_np),
        "draw_streaks": ((size, size, *seg, op), K._draw_streaks_nb, K._draw_streaks_np),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  max|diff|")
    for name, (a, nb, npf) in cases(args.size, rng).items():
        diff = float(np.max(np.abs(np.asarray(nb(*a)) - np.asarray(npf(*a)))))
        t_nb = min(timeit.repeat(lambda: nb(*a), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: npf(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
