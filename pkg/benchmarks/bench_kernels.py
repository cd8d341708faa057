"""Compare the compiled and numpy kernel backends on the hot loops.

    python3 benchmarks/bench_kernels.py --size 1000000 --repeat 5
"""

import argparse
import timeit

import numpy as np

from diloco import kernels


def cases(size: int, seed: int):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal(size).astype(np.float32)
    g = rng.standard_normal(size).astype(np.float32)
    m = np.zeros(size, np.float32)
    v = np.zeros(size, np.float32)
    d = rng.standard_normal(size)
    buf = np.zeros(size, np.float32)
    x = (rng.standard_normal(size) * 100).astype(np.float32)
    h, _ = kernels.get_backend("python").f32_to_f16(x)
    return {
        "adamw_update": lambda k: k.adamw_update(p, g, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.5, 0.5),
        "nesterov_update": lambda k: k.nesterov_update(p, d, buf, 0.7, 0.9),
        "f32_to_f16": lambda k: k.f32_to_f16(x),
        "f16_to_f32": lambda k: k.f16_to_f32(h),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; size={args.size}")
    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.size, args.seed).items():
        times = {}
        for b in backends:
            mod = kernels.get_backend(b)
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<18}" + "".join(f"{times[b]:>14.3f}" for b in backends) + f"{speedup:>10.2f}")


if __name__ == "__main__":
    main()
