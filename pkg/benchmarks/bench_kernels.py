"""Time the grid-sample kernels: compiled vs numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 16,32,64]

Shapes mimic deformable attention at the feature scale: B images of
S x S x C, with S*S*slots sample points each.
"""

import argparse
import timeit

import numpy as np

from uniwrv.tensorkit import backend


def case(size, channels=32, batch=4, points=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, size, size, channels))
    coords = rng.uniform(-1.0, size, (batch, size * size * points, 2))
    gout = rng.standard_normal((batch, coords.shape[1], channels))
    return x, coords, gout


def bench(kernels, x, coords, gout, repeat):
    fwd = min(timeit.repeat(lambda: kernels.grid_sample_forward(x, coords), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: kernels.grid_sample_backward(x, coords, gout, True, True), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="8,16,32")
    args = ap.parse_args()

    names = backend.available()
    if "cython" not in names:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'size':>5} {'points':>8} " + " ".join(f"{n + ' fwd':>12} {n + ' bwd':>12}" for n in names)
          + ("   speedup fwd/bwd" if len(names) > 1 else ""))
    for size in (int(s) for s in args.sizes.split(",")):
        x, coords, gout = case(size)
        times = {n: bench(backend.get(n), x, coords, gout, args.repeat) for n in names}
        ref = backend.get(names[0]).grid_sample_forward(x, coords)
        for n in names[1:]:
            assert np.allclose(backend.get(n).grid_sample_forward(x, coords), ref, atol=1e-10)
        line = f"{size:>5} {coords.shape[1]:>8} " + " ".join(f"{t[0] * 1e3:>10.2f}ms {t[1] * 1e3:>10.2f}ms"
                                                               for t in times.values())
        if len(names) > 1:
            py, cy = times["python"], times["cython"]
            line += f"   {py[0] / cy[0]:5.1f}x / {py[1] / cy[1]:5.1f}x"
        print(line)


if __name__ == "__main__":
    main()
